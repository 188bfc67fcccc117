"""Simulate (or load), split, estimate, validate and export in one run."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

from .choiceset import ChoiceSet
from .cnl import Dataset, complete_cases
from .config import ModelConfig, default_groups
from .estimation import EstimationResult, FitStatistics, ScaleTest, estimate, test_scale_parameters
from .synth import generate_dataset
from .validation import (
    GroupSummary,
    ValidationReport,
    frequency_csv,
    group_summary_csv,
    param_group_summary,
    split_dataset,
    validate,
)

INSIGNIFICANT_MARK = "*"


def _num(x: float | None):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else repr(x)


@dataclass(frozen=True)
class RunReport:
    config_hash: str
    data_hash: str
    n_observations: int
    dropped: tuple[str, ...]
    n_estimation: int
    n_validation: int
    result: EstimationResult
    fit: FitStatistics
    scale_tests: tuple[ScaleTest, ...]
    validations: tuple[ValidationReport, ...]
    groups: tuple[GroupSummary, ...]
    wall_time: float

    def numeric_content(self) -> dict:
        """Everything except the wall time; identical inputs give identical content."""
        r = self.result
        return {
            "config_hash": self.config_hash,
            "data_hash": self.data_hash,
            "n_observations": self.n_observations,
            "dropped": list(self.dropped),
            "n_estimation": self.n_estimation,
            "n_validation": self.n_validation,
            "estimation": {
                "converged": r.converged,
                "iterations": r.iterations,
                "message": r.message,
                "gradient_norm": _num(r.gradient_norm),
                "null_loglik": _num(r.null_loglik),
                "final_loglik": _num(r.final_loglik),
                "se_status": r.se_status,
                "parameters": [
                    {"name": n, "estimate": _num(e), "std_error": _num(s)}
                    for n, e, s in zip(r.names, r.estimates, r.std_errors)
                ],
            },
            "fit": {"rho2": _num(self.fit.rho2), "adj_rho2": _num(self.fit.adj_rho2),
                    "lr_statistic": _num(self.fit.lr_statistic)},
            "scale_tests": [
                {"nest": s.nest, "estimate": _num(s.estimate), "se": _num(s.se), "t": _num(s.t),
                 "significant": s.significant}
                for s in self.scale_tests
            ],
            "validation": [
                {"cells": list(v.cells), "statistic": _num(v.statistic), "df": v.df, "p_value": _num(v.p_value),
                 "critical_95": _num(v.critical_95), "critical_99": _num(v.critical_99),
                 "reject_95": v.reject_95, "reject_99": v.reject_99}
                for v in self.validations
            ],
            "parameter_groups": [
                {"group": g.group, "median": _num(g.median), "q1": _num(g.q1), "q3": _num(g.q3)} for g in self.groups
            ],
        }

    def to_json(self) -> str:
        doc = self.numeric_content()
        doc["wall_time_seconds"] = self.wall_time
        return json.dumps(doc, indent=2) + "\n"


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for obs in dataset:
        h.update(f"{obs.id}|{obs.chosen.mask}|{obs.availability}|".encode())
        for k in sorted(obs.covariates):
            h.update(f"{k}={float(obs.covariates[k]).hex()};".encode())
    return h.hexdigest()[:16]


def estimates_csv(result: EstimationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "estimate", "std_error", "t_stat"])
    for n, e, s, t in zip(result.names, result.estimates, result.std_errors, result.t_stats):
        w.writerow([n, repr(float(e)), repr(float(s)), repr(float(t))])
    return buf.getvalue()


def read_estimates(text: str) -> dict[str, float]:
    from .errors import LoadError

    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:2] != ["parameter", "estimate"]:
        raise LoadError("estimates file must start with 'parameter,estimate'")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out[row[0]] = float(row[1])
        except (IndexError, ValueError):
            raise LoadError(f"estimates file, row {lineno}: bad estimate {row!r}") from None
    return out


def scale_tests_csv(tests) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["nest", "estimate", "std_error", "t_vs_1", "significant_95"])
    for s in tests:
        w.writerow([s.nest, repr(s.estimate), "" if s.se is None else repr(s.se),
                    "" if s.t is None else repr(s.t), "" if s.significant is None else int(s.significant)])
    return buf.getvalue()


def table_summary(result: EstimationResult, tests, choiceset: ChoiceSet) -> str:
    """Fit block in the layout of a published estimation table."""
    fit = result.fit
    names = {n.code: n.name or n.code for n in choiceset.nests}
    rows = [
        ("Number of estimated parameters", f"{result.n_free}"),
        ("Number of observations", f"{result.n_obs}"),
        ("Null log-likelihood L(0)", f"{result.null_loglik:.3f}"),
        ("Final log-likelihood L(beta)", f"{result.final_loglik:.3f}"),
        ("Likelihood ratio test -2[L(0) - L(beta)]", f"{fit.lr_statistic:.3f}"),
        ("Rho-square", f"{fit.rho2:.3f}"),
        ("Adjusted rho-square", f"{fit.adj_rho2:.3f}"),
    ]
    starred = False
    for s in tests:
        mark = ""
        if s.significant is None:
            mark = " (untestable)"
        elif not s.significant:
            mark = INSIGNIFICANT_MARK
            starred = True
        rows.append((f"Scale parameter mu for '{names.get(s.nest, s.nest)}' nest", f"{s.estimate:.2f}{mark}"))
    width = max(len(r[0]) for r in rows) + 2
    lines = [f"{k:<{width}}{v}" for k, v in rows]
    lines.append(f"{'Converged':<{width}}{'yes' if result.converged else 'NO'} ({result.message})")
    if starred:
        lines.append(f"{INSIGNIFICANT_MARK} not significantly different from 1 at the 95% level (t-test against 1)")
    return "\n".join(lines) + "\n"


def run_pipeline(
    config: ModelConfig,
    dataset: Dataset | None = None,
    out_dir: str | Path | None = None,
    replication: int = 0,
) -> RunReport:
    """Full workflow; writes artifacts to ``out_dir`` when given."""
    started = time.perf_counter()
    model = config.model
    if dataset is None:
        dataset = generate_dataset(config.generator(), replication)
    usable, dropped = complete_cases(dataset, model.spec.used_covariates)
    est_part, val_part = split_dataset(usable, config.validation.holdout, config.validation.seed)
    result = estimate(model, est_part, config.estimation)
    tests = tuple(test_scale_parameters(result))
    reports = tuple(validate(model, result.theta, val_part, cells) for cells in config.validation.cells)
    groups = tuple(param_group_summary(result.as_dict(), config.groups or default_groups(model)))
    report = RunReport(
        config.digest, dataset_hash(dataset), len(dataset), tuple(dropped), len(est_part), len(val_part),
        result, result.fit, tests, reports, groups, time.perf_counter() - started,
    )
    if out_dir is not None:
        write_artifacts(report, model.choiceset, Path(out_dir))
    return report


def write_artifacts(report: RunReport, choiceset: ChoiceSet, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "estimates.csv": estimates_csv(report.result),
        "scale_tests.csv": scale_tests_csv(report.scale_tests),
        "param_groups.csv": group_summary_csv(report.groups),
        "frequencies.csv": frequency_csv(report.validations[0]),
        "summary.txt": table_summary(report.result, report.scale_tests, choiceset)
        + "\n" + "\n".join(v.summary() for v in report.validations) + "\n",
        "report.json": report.to_json(),
    }
    written = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        written.append(path)
    return written
