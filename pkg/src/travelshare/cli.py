"""Command-line interface.

Subcommands::

    enumerate         print the choice set in canonical order
    default-config    print the configuration of the default synthetic scenario
    simulate          draw a dataset from the [truth] and [covariates] of a config
    estimate          fit a model and print the fit summary
    validate          chi-square comparison of observed and predicted frequencies
    run               simulate or load, split, estimate, validate, export
    vtts              value of travel time savings with and without time sharing
    timeshare-check   matrix versus set-keyed total time on random allocations

Failures exit nonzero and print one JSON object ``{"error": <category>,
"message": ...}`` on stderr.

The ``vtts`` command takes either partial derivatives as ``key=value`` pairs
(``U_x U_l U_h U_s F_s F_h t_s h_t_s l_t_s c_s``; omitted ones are 0, except
``F_h`` which defaults to 1) or expressions::

    --expr "U=log(x) + 0.5*log(l) - 0.1*h^2 - 0.2*(s-8)^2" --expr "F=h - 8 - 0.1*s" ...
    --at x=100,l=6,h=8,s=7.5

Expressions use numbers, the variables of their function (U: x l h s;
F: h s; c t h_t l_t: s), ``+ - * /``, ``**`` or ``^``, unary minus, and
``exp``, ``log``, ``sqrt``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .choiceset import DEFAULT_NESTS, enumerate_combinations, parse_combination_label
from .errors import ParseError, TravelshareError

EXIT_CODES = {
    "error": 1,
    "usage": 2,
    "parse": 3,
    "config": 4,
    "load": 5,
    "data": 6,
    "domain": 7,
    "numeric": 8,
    "unsupported": 9,
    "io": 10,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # pragma: no cover - exercised through main
        raise _UsageError(f"{self.prog}: {message}")


class _UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _config(path):
    from .config import load_model_config

    return load_model_config(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_enumerate(args, out) -> int:
    if args.config:
        cs = _config(args.config).model.choiceset
    else:
        codes = [c.strip() for c in args.nests.split(",") if c.strip()]
        by_code = {n.code: n for n in DEFAULT_NESTS}
        from .choiceset import NestId

        nests = tuple(by_code.get(c, NestId(c, c)) for c in codes)
        exclude = [parse_combination_label(e, nests) for e in args.exclude]
        cs = enumerate_combinations(nests, exclude)
    for k, c in enumerate(cs, start=1):
        out.write(f"{k}\t{c.label}\n")
    return 0


def cmd_default_config(args, out) -> int:
    from .config import default_config_text

    text = default_config_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return 0


def cmd_simulate(args, out) -> int:
    from .dataio import save_dataset
    from .synth import generate_dataset

    cfg = _config(args.config)
    gen = cfg.generator(args.n, args.seed)
    data = generate_dataset(gen, args.replication)
    save_dataset(data, args.out, cfg.model.choiceset)
    out.write(f"wrote {len(data)} observations to {args.out}\n")
    return 0


def cmd_estimate(args, out) -> int:
    from .cnl import complete_cases
    from .dataio import load_dataset
    from .estimation import estimate, test_scale_parameters
    from .pipeline import estimates_csv, scale_tests_csv, table_summary

    cfg = _config(args.config)
    model = cfg.model
    data = load_dataset(args.data, model.choiceset)
    usable, dropped = complete_cases(data, model.spec.used_covariates)
    if dropped:
        out.write(f"dropped {len(dropped)} of {len(data)} observations with missing covariates\n")
    result = estimate(model, usable, cfg.estimation)
    tests = test_scale_parameters(result)
    out.write(table_summary(result, tests, model.choiceset))
    for d in result.diagnostics:
        out.write(f"note: {d}\n")
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "estimates.csv").write_text(estimates_csv(result), encoding="utf-8")
        (d / "scale_tests.csv").write_text(scale_tests_csv(tests), encoding="utf-8")
    return 0


def _frequency_file(path: str):
    import csv

    from .errors import LoadError

    try:
        rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from None
    if not rows or [c.strip() for c in rows[0]] != ["combination", "observed", "expected"]:
        raise LoadError(f"{path}: header must be 'combination,observed,expected'")
    labels, O, E = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            labels.append(row[0])
            O.append(float(row[1]))
            E.append(float(row[2]))
        except (IndexError, ValueError):
            raise LoadError(f"{path}, row {lineno}: expected a label and two numbers") from None
    return labels, O, E


def cmd_validate(args, out) -> int:
    from .validation import chi_square_test, frequency_csv, validate

    if args.frequencies:
        labels, O, E = _frequency_file(args.frequencies)
        reports = [chi_square_test(O, E, c, labels) for c in (args.cells or ["all"])]
    else:
        if not (args.config and args.data and args.estimates):
            raise _UsageError("validate needs --frequencies, or --config, --data and --estimates")
        from .cnl import complete_cases
        from .dataio import load_dataset
        from .errors import LoadError
        from .pipeline import read_estimates

        cfg = _config(args.config)
        model = cfg.model
        try:
            values = read_estimates(Path(args.estimates).read_text(encoding="utf-8"))
        except OSError as exc:
            raise LoadError(f"cannot read {args.estimates}: {exc.strerror}") from None
        theta = model.theta(values)
        data, _ = complete_cases(load_dataset(args.data, model.choiceset), model.spec.used_covariates)
        cells = args.cells or list(cfg.validation.cells)
        reports = [validate(model, theta, data, c) for c in cells]
    for r in reports:
        out.write(r.summary() + "\n")
    if args.out:
        Path(args.out).write_text(frequency_csv(reports[0]), encoding="utf-8")
    return 0


def cmd_run(args, out) -> int:
    from .dataio import load_dataset
    from .pipeline import run_pipeline, table_summary

    cfg = _config(args.config)
    data = load_dataset(args.data, cfg.model.choiceset) if args.data else None
    report = run_pipeline(cfg, data, args.out_dir, args.replication)
    out.write(table_summary(report.result, report.scale_tests, cfg.model.choiceset))
    for v in report.validations:
        out.write(v.summary() + "\n")
    out.write(f"artifacts in {args.out_dir} (wall time {report.wall_time:.1f} s)\n")
    return 0


_PARTIAL_DEFAULTS = dict(U_x=None, U_l=0.0, U_h=0.0, U_s=0.0, F_s=0.0, F_h=1.0, t_s=None, h_t_s=0.0, l_t_s=0.0, c_s=0.0)


def _pairs(items: Sequence[str], what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items:
        for part in item.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise ParseError(f"{what}: expected key=value, got {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            if k in out:
                raise ParseError(f"{what}: {k} given twice")
            out[k] = v
    return out


def _float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{what}: {text!r} is not a number") from None


def cmd_vtts(args, out) -> int:
    from .vtts import PartialBundle, compare_effects, instance_from_expressions, partials

    if args.expr:
        exprs = {}
        for e in args.expr:
            if "=" not in e:
                raise ParseError(f"--expr expects NAME=expression, got {e!r}")
            k, v = (s.strip() for s in e.split("=", 1))
            exprs[k] = v
        point = {k: _float(v, f"--at {k}") for k, v in _pairs(args.at or [], "--at").items()}
        bundle = partials(instance_from_expressions(exprs, point, args.wage))
    else:
        given = _pairs(args.partials, "partials")
        unknown = set(given) - set(_PARTIAL_DEFAULTS)
        if unknown:
            raise ParseError(f"unknown partial(s) {sorted(unknown)}; known: {', '.join(_PARTIAL_DEFAULTS)}")
        values = {}
        for k, default in _PARTIAL_DEFAULTS.items():
            if k in given:
                values[k] = _float(given[k], k)
            elif default is None:
                raise ParseError(f"partial {k} is required")
            else:
                values[k] = default
        bundle = PartialBundle(**values)
    cmp = compare_effects(bundle, args.wage)
    if args.json:
        doc = {
            "partials": bundle.__dict__,
            "wage": args.wage,
            "timeshare": cmp.timeshare.__dict__,
            "classical": cmp.classical.__dict__,
            "difference": cmp.difference,
            "denominator_effect": cmp.denominator_effect,
            "wage_effect": cmp.wage_effect,
        }
        out.write(json.dumps(doc, indent=2) + "\n")
        return 0
    ts, cl = cmp.timeshare, cmp.classical
    out.write("partials: " + ", ".join(f"{k}={_fmt(v)}" for k, v in bundle.__dict__.items()) + f"; w={_fmt(args.wage)}\n")
    out.write(f"time sharing value   {_fmt(ts.value)}\n")
    out.write(f"  wage term          {_fmt(ts.wage_term)}\n")
    out.write(f"  schedule term      {_fmt(ts.schedule_term)}\n")
    out.write(f"  direct term        {_fmt(ts.direct_term)}\n")
    out.write(f"  cost term          {_fmt(ts.cost_term)}\n")
    out.write(f"  denominator        {_fmt(ts.denominator)}\n")
    out.write(f"classical value      {_fmt(cl.value)}\n")
    out.write(f"difference           {_fmt(cmp.difference)}\n")
    out.write(f"  denominator effect {_fmt(cmp.denominator_effect)}\n")
    out.write(f"  wage effect        {_fmt(cmp.wage_effect)}\n")
    return 0


def cmd_timeshare_check(args, out) -> int:
    from .errors import NumericError
    from .timeshare import (
        ActivityUniverse,
        build_tensor,
        canonical_total_time,
        load_allocation,
        parse_activity_set,
        random_allocation,
        sharing_coefficient,
        tensor_total_time,
    )

    if args.allocation:
        from .errors import LoadError

        infeasible = frozenset(parse_activity_set(s) for s in args.infeasible)
        universe = ActivityUniverse(args.n, args.z, infeasible)
        try:
            text = Path(args.allocation).read_text(encoding="utf-8")
        except OSError as exc:
            raise LoadError(f"cannot read {args.allocation}: {exc.strerror}") from None
        allocs = [load_allocation(text, universe)]
    else:
        rng = np.random.default_rng(args.seed)
        allocs = [random_allocation(rng, args.max_n) for _ in range(args.trials)]
    worst = 0.0
    for a in allocs:
        canon = canonical_total_time(a)
        tens = tensor_total_time(build_tensor(a), a.universe)
        rel = abs(tens - canon) / max(abs(canon), 1e-300) if canon else abs(tens)
        worst = max(worst, rel)
    out.write(f"sharing coefficient (2, 2) = {sharing_coefficient(2, 2)}\n")
    if len(allocs) == 1:
        out.write(f"total time {_fmt(canonical_total_time(allocs[0]))}\n")
    out.write(f"{len(allocs)} allocation(s), max relative difference {worst:.3g}\n")
    if worst > args.tolerance:
        raise NumericError(f"matrix and set-keyed totals differ by {worst:.3g} > {args.tolerance:g}")
    out.write("OK\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="travelshare", description="Activity-combination choice models for train travel time use.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("enumerate", help="print the choice set")
    s.add_argument("--config")
    s.add_argument("--nests", default=",".join(n.code for n in DEFAULT_NESTS), help="comma-separated nest codes")
    s.add_argument("--exclude", action="append", default=[], help="combination label to drop (repeatable)")
    s.set_defaults(func=cmd_enumerate)

    s = sub.add_parser("default-config", help="print the default scenario configuration")
    s.add_argument("--out")
    s.set_defaults(func=cmd_default_config)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--replication", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="fit a model to a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("validate", help="chi-square validation")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--estimates", help="CSV written by estimate or run")
    s.add_argument("--frequencies", help="CSV with combination,observed,expected")
    s.add_argument("--cells", action="append", help="'all', 'a-b' or a comma list (repeatable)")
    s.add_argument("--out", help="frequency CSV for the first cell range")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", help="full pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset CSV; simulated from the config when omitted")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--replication", type=int, default=0)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("vtts", help="value of travel time savings")
    s.add_argument("partials", nargs="*", help="key=value partial derivatives")
    s.add_argument("--wage", "-w", type=float, default=0.0)
    s.add_argument("--expr", action="append", help="NAME=expression for U, F, c, t, h_t, l_t")
    s.add_argument("--at", action="append", help="evaluation point x=..,l=..,h=..,s=..")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_vtts)

    s = sub.add_parser("timeshare-check", help="matrix vs set-keyed total time")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-n", type=int, default=6)
    s.add_argument("--tolerance", type=float, default=1e-12)
    s.add_argument("--allocation", help="CSV with activities,duration")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--z", type=int, default=2)
    s.add_argument("--infeasible", action="append", default=[], help="activity set such as 1+2 (repeatable)")
    s.set_defaults(func=cmd_timeshare_check)
    return p


def _fail(category: str, message: str, err) -> int:
    err.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES.get(category, 1)


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "vtts" and args.expr and args.partials:
            raise _UsageError("give either partials or --expr, not both")
        return args.func(args, out)
    except _UsageError as exc:
        return _fail("usage", str(exc), err)
    except TravelshareError as exc:
        return _fail(exc.category, str(exc), err)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}", err)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
