"""Value of travel time savings with and without time sharing.

With work and leisure allowed to overlap travel, the ratio of the time and
income multipliers is

    mu/lambda = (w h^t_s + F_s (U_l - U_h - w U_x) / (F_h U_x) + U_s / U_x - c_s)
                / (h^t_s + l^t_s + t_s)

and with the classical constraint (h^t = l^t = 0) the wage term and the two
shared-time derivatives disappear from the expression.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, replace
from typing import Callable, Mapping

from .errors import DomainError, NumericError, ParseError

STEP = 1e-6


@dataclass(frozen=True)
class SmallModelInstance:
    """Caller-supplied functions of the schedule model and an evaluation point.

    ``U(x, l, h, s)``, ``F(h, s)``, ``c(s)``, ``t(s)``, ``h_t(s)``, ``l_t(s)``.
    """

    U: Callable[[float, float, float, float], float]
    F: Callable[[float, float], float]
    c: Callable[[float], float]
    t: Callable[[float], float]
    h_t: Callable[[float], float]
    l_t: Callable[[float], float]
    wage: float
    x: float
    l: float
    h: float
    s: float


@dataclass(frozen=True)
class PartialBundle:
    U_x: float
    U_l: float
    U_h: float
    U_s: float
    F_s: float
    F_h: float
    t_s: float
    h_t_s: float
    l_t_s: float
    c_s: float

    def __post_init__(self) -> None:
        for k, v in self.__dict__.items():
            if not math.isfinite(v):
                raise NumericError(f"partial derivative {k} is not finite: {v}")

    def without_sharing(self) -> "PartialBundle":
        return replace(self, h_t_s=0.0, l_t_s=0.0)


@dataclass(frozen=True)
class VttsResult:
    value: float
    wage_term: float
    schedule_term: float
    direct_term: float
    cost_term: float
    denominator: float

    @property
    def bracket(self) -> float:
        return self.wage_term + self.schedule_term + self.direct_term + self.cost_term


def _central(f: Callable[[float], float], x0: float, what: str) -> float:
    h = max(STEP, STEP * abs(x0))
    hi, lo = f(x0 + h), f(x0 - h)
    for point, v in ((x0 + h, hi), (x0 - h, lo)):
        if not math.isfinite(v):
            raise NumericError(f"{what} is not finite at {point!r}")
    return (hi - lo) / (2 * h)


def partials(inst: SmallModelInstance) -> PartialBundle:
    """Central finite differences of every function at the evaluation point."""
    x, l, h, s = inst.x, inst.l, inst.h, inst.s
    return PartialBundle(
        U_x=_central(lambda v: inst.U(v, l, h, s), x, "U (x varied)"),
        U_l=_central(lambda v: inst.U(x, v, h, s), l, "U (l varied)"),
        U_h=_central(lambda v: inst.U(x, l, v, s), h, "U (h varied)"),
        U_s=_central(lambda v: inst.U(x, l, h, v), s, "U (s varied)"),
        F_s=_central(lambda v: inst.F(h, v), s, "F (s varied)"),
        F_h=_central(lambda v: inst.F(v, s), h, "F (h varied)"),
        t_s=_central(inst.t, s, "t"),
        h_t_s=_central(inst.h_t, s, "h_t"),
        l_t_s=_central(inst.l_t, s, "l_t"),
        c_s=_central(inst.c, s, "c"),
    )


def _bracket(p: PartialBundle, w: float) -> tuple[float, float, float, float]:
    if p.U_x == 0:
        raise DomainError("U_x vanishes; the value of time is undefined")
    if p.F_h == 0:
        raise DomainError("F_h vanishes; the schedule term is undefined")
    wage = w * p.h_t_s
    schedule = p.F_s * (p.U_l - p.U_h - w * p.U_x) / (p.F_h * p.U_x) + 0.0  # no negative zero
    direct = p.U_s / p.U_x
    cost = -p.c_s
    return wage, schedule, direct, cost


def vtts_timeshare(p: PartialBundle, w: float) -> VttsResult:
    wage, schedule, direct, cost = _bracket(p, w)
    denom = p.h_t_s + p.l_t_s + p.t_s
    if denom == 0:
        raise DomainError("h_t_s + l_t_s + t_s vanishes")
    return VttsResult((wage + schedule + direct + cost) / denom, wage, schedule, direct, cost, denom)


def vtts_classical(p: PartialBundle, w: float = 0.0) -> VttsResult:
    """Classical value; ``w`` enters only through the schedule term."""
    _, schedule, direct, cost = _bracket(p, w)
    if p.t_s == 0:
        raise DomainError("t_s vanishes")
    return VttsResult((schedule + direct + cost) / p.t_s, 0.0, schedule, direct, cost, p.t_s)


@dataclass(frozen=True)
class EffectComparison:
    classical: VttsResult
    timeshare: VttsResult
    difference: float  # timeshare - classical
    denominator_effect: float  # change from the enlarged denominator alone
    wage_effect: float  # contribution of the wage earned while travelling

    @property
    def denominator_sign(self) -> int:
        return int(math.copysign(1, self.denominator_effect)) if self.denominator_effect else 0

    @property
    def wage_sign(self) -> int:
        return int(math.copysign(1, self.wage_effect)) if self.wage_effect else 0


def compare_effects(p: PartialBundle, w: float) -> EffectComparison:
    classical = vtts_classical(p.without_sharing(), w)
    timeshare = vtts_timeshare(p, w)
    base = classical.bracket
    denom_effect = base / timeshare.denominator - classical.value
    wage_effect = timeshare.wage_term / timeshare.denominator
    return EffectComparison(classical, timeshare, timeshare.value - classical.value, denom_effect, wage_effect)


# ---------------------------------------------------------------------------
# expression language
#
#   expr := number | name | expr (+ - * / **) expr | -expr | +expr
#         | exp(expr) | log(expr) | sqrt(expr) | (expr)
#
# ``^`` is accepted as a synonym for ``**``.

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {"exp": math.exp, "log": math.log, "sqrt": math.sqrt}


def compile_expression(text: str, variables: tuple[str, ...]) -> Callable[..., float]:
    """Compile ``text`` into a function of the positional ``variables``."""
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ParseError(f"cannot parse expression {text!r}: {exc.msg} at column {exc.offset}") from None

    def check(node: ast.AST) -> None:
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ParseError(f"unsupported constant {node.value!r} in {text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in variables:
                raise ParseError(f"unknown variable {node.id!r} in {text!r}; allowed: {', '.join(variables)}")
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if len(node.args) != 1 or node.keywords:
                raise ParseError(f"{node.func.id} takes exactly one argument in {text!r}")
            check(node.args[0])
        else:
            raise ParseError(f"unsupported construct {ast.dump(node)[:40]}... in {text!r}")

    check(tree)

    def run(node: ast.AST, env: Mapping[str, float]) -> float:
        if isinstance(node, ast.Expression):
            return run(node.body, env)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](run(node.left, env), run(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](run(node.operand, env))
        return _FUNCS[node.func.id](run(node.args[0], env))

    def fn(*args: float) -> float:
        try:
            return float(run(tree, dict(zip(variables, args))))
        except (ValueError, ZeroDivisionError, OverflowError):
            return math.nan

    return fn


SIGNATURES = {
    "U": ("x", "l", "h", "s"),
    "F": ("h", "s"),
    "c": ("s",),
    "t": ("s",),
    "h_t": ("s",),
    "l_t": ("s",),
}


def instance_from_expressions(
    expressions: Mapping[str, str], point: Mapping[str, float], wage: float
) -> SmallModelInstance:
    missing = set(SIGNATURES) - set(expressions)
    extra = set(expressions) - set(SIGNATURES)
    if missing or extra:
        raise ParseError(f"need expressions for {sorted(SIGNATURES)}; missing {sorted(missing)}, unknown {sorted(extra)}")
    need = {"x", "l", "h", "s"}
    if set(point) != need:
        raise ParseError(f"evaluation point needs exactly x, l, h, s; got {sorted(point)}")
    fns = {k: compile_expression(v, SIGNATURES[k]) for k, v in expressions.items()}
    return SmallModelInstance(wage=wage, **fns, **{k: float(v) for k, v in point.items()})
