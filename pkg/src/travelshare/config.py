"""Model configuration files.

A configuration is a sequence of ``[section]`` headers followed by
``key = value`` lines; ``#`` starts a comment.  Sections and keys::

    [nests]              <code> = display name; <code>.init = 1.5; <code>.fixed = false
    [choiceset]          auto = true | false; alternatives = P, L+W, ...; exclude = L+W, ...
    [utility]            asc = all | none; term = <term> (repeatable)
    [estimation]         tolerance, max_iterations, reference
    [validation]         holdout, seed, cells (``all | 6-31``: several ranges separated by '|')
    [covariates]         <name> = bernoulli(p) | categorical(p0, p1, ...) | uniform(a, b)
                         | normal(m, s) | threshold(<source>, cutoff)
    [truth]              <parameter> = value (nest scales as mu_<code>)
    [simulation]         n, seed, replications
    [groups]             <group> = param, param, ...

Utility terms::

    asc(<label>)
    beta(<name>) * <covariate> @ contains(<code>) | alt(<label>) | any
    beta(<name>) * <covariate> * nest_count

each optionally followed by ``fixed <value>`` or ``start <value>``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .choiceset import DEFAULT_NESTS, ChoiceSet, Combination, NestId, enumerate_combinations
from .cnl import CnlModel, CnlStructure, Predicate, UtilitySpec, UtilityTerm, asc_terms
from .errors import ConfigError, TravelshareError
from .estimation import EstimationSettings
from .synth import CovariateGenerator, CovariateSpec, GeneratorConfig

SECTIONS = ("nests", "choiceset", "utility", "estimation", "validation", "covariates", "truth", "simulation", "groups")

_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_TAIL = r"(?:\s+(?P<mode>fixed|start)\s+(?P<num>\S+))?\s*$"
_ASC = re.compile(r"^asc\(\s*(?P<label>[^)\s]+)\s*\)" + _TAIL)
_BETA = re.compile(
    rf"^beta\(\s*(?P<name>{_NAME})\s*\)\s*\*\s*(?P<cov>{_NAME})\s*"
    r"(?:@\s*(?P<pred>contains|alt)\(\s*(?P<arg>[^)\s]+)\s*\)|@\s*(?P<any>any)|\*\s*(?P<count>nest_count))" + _TAIL
)
_GEN = re.compile(rf"^(?P<kind>{_NAME})\((?P<args>[^)]*)\)$")


@dataclass(frozen=True)
class ValidationOptions:
    holdout: float = 0.2
    seed: int = 0
    cells: tuple[str, ...] = ("all",)


@dataclass(frozen=True)
class SimulationOptions:
    n: int = 20287
    seed: int = 0
    replications: int = 1


@dataclass(frozen=True)
class ModelConfig:
    model: CnlModel
    estimation: EstimationSettings
    validation: ValidationOptions
    covariates: CovariateSpec | None = None
    truth: Mapping[str, float] | None = None
    simulation: SimulationOptions = field(default_factory=SimulationOptions)
    groups: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def generator(self, n: int | None = None, seed: int | None = None) -> GeneratorConfig:
        if self.truth is None or self.covariates is None:
            raise ConfigError("simulation needs [truth] and [covariates] sections")
        sim = self.simulation
        return GeneratorConfig(
            self.model, dict(self.truth), self.covariates,
            sim.n if n is None else n, sim.seed if seed is None else seed, sim.replications,
        )


def _number(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None


def _integer(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {text!r}") from None


def _bool(text: str, where: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ConfigError(f"{where}: expected true or false, got {text!r}")


def _lex(text: str, source: str) -> dict[str, list[tuple[int, str, str]]]:
    sections: dict[str, list[tuple[int, str, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        m = re.fullmatch(r"\[\s*([A-Za-z_]+)\s*\]", line)
        if m:
            current = m.group(1)
            if current not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{current}]")
            if current in sections:
                raise ConfigError(f"{where}: section [{current}] repeated")
            sections[current] = []
            continue
        if line.startswith("["):
            raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"{where}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}: empty key")
        sections[current].append((lineno, key, value))
    return sections


def _single(entries, allowed: set[str], section: str, source: str) -> dict[str, tuple[int, str]]:
    out: dict[str, tuple[int, str]] = {}
    for lineno, key, value in entries:
        where = f"{source}:{lineno}"
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in out:
            raise ConfigError(f"{where}: key {key!r} repeated in [{section}]")
        out[key] = (lineno, value)
    return out


def _parse_nests(entries, source):
    names: dict[str, str] = {}
    init: dict[str, float] = {}
    fixed: dict[str, bool] = {}
    lines: dict[str, int] = {}
    for lineno, key, value in entries:
        where = f"{source}:{lineno}"
        code, _, attr = key.partition(".")
        if not re.fullmatch(r"[A-Za-z][A-Za-z0-9_]*", code):
            raise ConfigError(f"{where}: invalid nest code {code!r}")
        if attr == "":
            if code in names:
                raise ConfigError(f"{where}: nest {code} declared twice")
            names[code] = value
            lines[code] = lineno
        elif attr == "init":
            init[code] = _number(value, where)
            lines.setdefault(code + ".", lineno)
        elif attr == "fixed":
            fixed[code] = _bool(value, where)
        else:
            raise ConfigError(f"{where}: unknown nest attribute {attr!r}")
    for code in list(init) + list(fixed):
        if code not in names:
            raise ConfigError(f"{source}: attribute given for undeclared nest {code}")
    if not names:
        raise ConfigError(f"{source}: [nests] declares no nest")
    nests = tuple(NestId(c, n) for c, n in names.items())
    return nests, init, fixed, lines


def _parse_term(text: str, where: str, nests) -> UtilityTerm:
    from .choiceset import parse_combination_label

    m = _ASC.match(text)
    if m:
        try:
            combo = parse_combination_label(m.group("label"), nests)
        except TravelshareError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        kw = _tail(m, where)
        return UtilityTerm.asc(combo, **kw)
    m = _BETA.match(text)
    if not m:
        raise ConfigError(f"{where}: cannot parse utility term {text!r}")
    kw = _tail(m, where)
    if m.group("count"):
        return UtilityTerm.nest_count(m.group("name"), m.group("cov"), **kw)
    if m.group("any"):
        pred = Predicate("any")
    else:
        arg = m.group("arg")
        codes = [n.code for n in nests]
        if m.group("pred") == "contains" and arg not in codes:
            raise ConfigError(f"{where}: unknown nest {arg!r} in contains()")
        if m.group("pred") == "alt":
            try:
                arg = parse_combination_label(arg, nests).label
            except TravelshareError as exc:
                raise ConfigError(f"{where}: {exc}") from None
        pred = Predicate(m.group("pred"), arg)
    return UtilityTerm.beta(m.group("name"), m.group("cov"), pred, **kw)


def _tail(m: re.Match, where: str) -> dict:
    if not m.group("mode"):
        return {}
    value = _number(m.group("num"), where)
    return {"fixed": m.group("mode") == "fixed", "value": value}


def parse_model_config(text: str, source: str = "<config>") -> ModelConfig:
    sections = _lex(text, source)
    for required in ("nests", "utility"):
        if required not in sections:
            raise ConfigError(f"{source}: missing section [{required}]")
    nests, init, fixed, _ = _parse_nests(sections["nests"], source)

    cs_opts = _single(sections.get("choiceset", []), {"auto", "alternatives", "exclude"}, "choiceset", source)
    auto = _bool(cs_opts["auto"][1], f"{source}:{cs_opts['auto'][0]}") if "auto" in cs_opts else True
    try:
        if auto:
            if "alternatives" in cs_opts:
                raise ConfigError(f"{source}:{cs_opts['alternatives'][0]}: 'alternatives' needs auto = false")
            excl = [s.strip() for s in cs_opts["exclude"][1].split(",") if s.strip()] if "exclude" in cs_opts else []
            choiceset = enumerate_combinations(nests, excl)
        else:
            if "alternatives" not in cs_opts:
                raise ConfigError(f"{source}: auto = false requires 'alternatives'")
            if "exclude" in cs_opts:
                raise ConfigError(f"{source}:{cs_opts['exclude'][0]}: 'exclude' needs auto = true")
            choiceset = ChoiceSet.from_labels(
                [s.strip() for s in cs_opts["alternatives"][1].split(",") if s.strip()], nests
            )
    except ConfigError:
        raise
    except TravelshareError as exc:
        line = next((v[0] for k, v in cs_opts.items()), 0)
        raise ConfigError(f"{source}:{line}: {exc}") from None

    est = _single(sections.get("estimation", []), {"tolerance", "max_iterations", "reference"}, "estimation", source)
    reference_label = est["reference"][1] if "reference" in est else nests[0].code
    try:
        reference = choiceset.parse(reference_label)
    except TravelshareError as exc:
        raise ConfigError(f"{source}:{est['reference'][0]}: {exc}") from None
    if reference not in choiceset:
        raise ConfigError(f"{source}: reference alternative {reference.label} is not in the choice set")

    terms: list[UtilityTerm] = []
    asc_mode = "none"
    term_lines: dict[str, int] = {}
    for lineno, key, value in sections["utility"]:
        where = f"{source}:{lineno}"
        if key == "asc":
            if value not in ("all", "none"):
                raise ConfigError(f"{where}: asc must be 'all' or 'none'")
            asc_mode = value
        elif key == "term":
            t = _parse_term(value, where, nests)
            if t.kind == "asc" and t.combination == reference and not (t.fixed and t.value == 0.0):
                raise ConfigError(f"{where}: constant of the reference alternative {reference.label} must stay fixed at 0")
            if t.kind == "asc" and t.combination not in choiceset:
                raise ConfigError(f"{where}: {t.combination.label} is not in the choice set")
            if t.parameter in term_lines:
                raise ConfigError(f"{where}: parameter {t.parameter!r} already declared on line {term_lines[t.parameter]}")
            term_lines[t.parameter] = lineno
            terms.append(t)
        else:
            raise ConfigError(f"{where}: unknown key {key!r} in [utility]")
    if asc_mode == "all":
        explicit = {t.combination for t in terms if t.kind == "asc"}
        terms = [t for t in asc_terms(choiceset, reference) if t.combination not in explicit] + terms

    gens = None
    if "covariates" in sections:
        gens = CovariateSpec(tuple(_parse_generator(k, v, f"{source}:{ln}") for ln, k, v in sections["covariates"]))

    try:
        spec = UtilitySpec.build(
            terms, reference, covariates=None if gens is None else _registry(gens, terms)
        )
        scale_init = tuple(init.get(n.code, 1.0 if fixed.get(n.code, False) else 1.5) for n in nests)
        structure = CnlStructure(choiceset, scale_init, tuple(fixed.get(n.code, False) for n in nests))
        model = CnlModel(structure, spec)
    except ConfigError:
        raise
    except TravelshareError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    try:
        settings = EstimationSettings(
            tolerance=_number(est["tolerance"][1], f"{source}:{est['tolerance'][0]}") if "tolerance" in est else 1e-6,
            max_iterations=_integer(est["max_iterations"][1], f"{source}:{est['max_iterations'][0]}")
            if "max_iterations" in est else 500,
        )
    except ConfigError:
        raise
    except TravelshareError as exc:
        raise ConfigError(f"{source}: [estimation] {exc}") from None

    val = _single(sections.get("validation", []), {"holdout", "seed", "cells"}, "validation", source)
    holdout = _number(val["holdout"][1], f"{source}:{val['holdout'][0]}") if "holdout" in val else 0.2
    if not 0.0 < holdout < 1.0:
        raise ConfigError(f"{source}:{val['holdout'][0]}: holdout must lie in (0, 1)")
    cells = tuple(c.strip() for c in val["cells"][1].split("|")) if "cells" in val else ("all",)
    from .validation import parse_cell_range

    for c in cells:
        try:
            parse_cell_range(c, len(choiceset))
        except TravelshareError as exc:
            raise ConfigError(f"{source}:{val['cells'][0]}: {exc}") from None
    validation = ValidationOptions(
        holdout, _integer(val["seed"][1], f"{source}:{val['seed'][0]}") if "seed" in val else 0, cells
    )

    truth = None
    if "truth" in sections:
        truth = {}
        for lineno, key, value in sections["truth"]:
            where = f"{source}:{lineno}"
            if key not in model.parameter_names:
                raise ConfigError(f"{where}: {key!r} is not a free parameter of the model")
            if key in truth:
                raise ConfigError(f"{where}: {key!r} repeated")
            truth[key] = _number(value, where)

    sim = _single(sections.get("simulation", []), {"n", "seed", "replications"}, "simulation", source)
    simulation = SimulationOptions(
        _integer(sim["n"][1], f"{source}:{sim['n'][0]}") if "n" in sim else 20287,
        _integer(sim["seed"][1], f"{source}:{sim['seed'][0]}") if "seed" in sim else 0,
        _integer(sim["replications"][1], f"{source}:{sim['replications'][0]}") if "replications" in sim else 1,
    )

    groups: dict[str, tuple[str, ...]] = {}
    for lineno, key, value in sections.get("groups", []):
        where = f"{source}:{lineno}"
        names = tuple(s.strip() for s in value.split(",") if s.strip())
        if key in groups:
            raise ConfigError(f"{where}: group {key!r} repeated")
        if not names:
            raise ConfigError(f"{where}: group {key!r} is empty")
        unknown = [n for n in names if n not in model.parameter_names]
        if unknown:
            raise ConfigError(f"{where}: group {key!r} names unknown parameters {unknown}")
        groups[key] = names

    return ModelConfig(model, settings, validation, gens, truth, simulation, groups, text)


def _registry(gens: CovariateSpec, terms) -> tuple[str, ...]:
    names = list(gens.names)
    for t in terms:
        if t.covariate is not None and t.covariate not in names:
            names.append(t.covariate)
    return tuple(names)


def _parse_generator(name: str, text: str, where: str) -> CovariateGenerator:
    if not re.fullmatch(_NAME, name):
        raise ConfigError(f"{where}: invalid covariate name {name!r}")
    m = _GEN.match(text.strip())
    if not m:
        raise ConfigError(f"{where}: cannot parse generator {text!r}")
    kind = m.group("kind")
    args = [a.strip() for a in m.group("args").split(",") if a.strip()]
    try:
        if kind == "threshold":
            if len(args) != 2:
                raise ConfigError(f"{where}: threshold(<source>, cutoff) takes two arguments")
            return CovariateGenerator(name, kind, (_number(args[1], where),), source=args[0])
        return CovariateGenerator(name, kind, tuple(_number(a, where) for a in args))
    except ConfigError:
        raise
    except TravelshareError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_model_config(path: str | Path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_model_config(text, str(path))


# ---------------------------------------------------------------------------
# rendering


def _term_text(t: UtilityTerm) -> str:
    if t.kind == "asc":
        body = f"asc({t.combination.label})"
    elif t.kind == "nest_count":
        body = f"beta({t.parameter}) * {t.covariate} * nest_count"
    else:
        body = f"beta({t.parameter}) * {t.covariate} @ {t.predicate}"
    if t.fixed:
        body += f" fixed {t.value!r}"
    elif t.value != 0.0:
        body += f" start {t.value!r}"
    return body


def _generator_text(g: CovariateGenerator) -> str:
    if g.kind == "threshold":
        return f"threshold({g.source}, {g.params[0]!r})"
    return f"{g.kind}({', '.join(repr(p) for p in g.params)})"


def render_config(
    model: CnlModel,
    settings: EstimationSettings | None = None,
    validation: ValidationOptions | None = None,
    covariates: CovariateSpec | None = None,
    truth: Mapping[str, float] | None = None,
    simulation: SimulationOptions | None = None,
    groups: Mapping[str, tuple[str, ...]] | None = None,
) -> str:
    settings = settings or EstimationSettings()
    validation = validation or ValidationOptions()
    st = model.structure
    lines = ["[nests]"]
    for n, init, fx in zip(st.nests, st.scale_init, st.scale_fixed):
        lines.append(f"{n.code} = {n.name or n.code}")
        lines.append(f"{n.code}.init = {init!r}")
        if fx:
            lines.append(f"{n.code}.fixed = true")
    cs = model.choiceset
    lines += ["", "[choiceset]", "auto = true"]
    if cs.exclusions:
        excl = sorted(cs.exclusions, key=lambda c: c.index)
        lines.append("exclude = " + ", ".join(c.label for c in excl))
    lines += ["", "[utility]"]
    for t in model.spec.terms:
        if t.kind == "asc" and t.combination == model.spec.reference:
            continue
        lines.append(f"term = {_term_text(t)}")
    lines += [
        "", "[estimation]",
        f"tolerance = {settings.tolerance!r}",
        f"max_iterations = {settings.max_iterations}",
        f"reference = {model.spec.reference.label}",
        "", "[validation]",
        f"holdout = {validation.holdout!r}",
        f"seed = {validation.seed}",
        f"cells = {' | '.join(validation.cells)}",
    ]
    if covariates is not None:
        lines += ["", "[covariates]"] + [f"{g.name} = {_generator_text(g)}" for g in covariates.generators]
    if truth is not None:
        lines += ["", "[truth]"] + [f"{k} = {truth[k]!r}" for k in model.parameter_names]
    if simulation is not None:
        lines += ["", "[simulation]", f"n = {simulation.n}", f"seed = {simulation.seed}",
                  f"replications = {simulation.replications}"]
    if groups:
        lines += ["", "[groups]"] + [f"{g} = {', '.join(names)}" for g, names in groups.items()]
    return "\n".join(lines) + "\n"


def default_groups(model: CnlModel) -> dict[str, tuple[str, ...]]:
    """Constants in one group; covariate terms grouped by covariate."""
    groups: dict[str, list[str]] = {}
    for t in model.spec.free_terms:
        key = "constants" if t.kind == "asc" else t.covariate
        groups.setdefault(key, []).append(t.parameter)
    return {k: tuple(v) for k, v in groups.items()}


def default_config_text() -> str:
    from .synth import DEFAULT_COVARIATES, default_model, default_truth

    model = default_model()
    return render_config(
        model,
        validation=ValidationOptions(0.2, 2004, ("all", "6-31")),
        covariates=DEFAULT_COVARIATES,
        truth=default_truth(model),
        simulation=SimulationOptions(20287 + 5049, 2004, 1),
        groups=default_groups(model),
    )
