"""Holdout validation: aggregate frequencies, chi-square test, plot-data exports."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import chi2

from .choiceset import ChoiceSet
from .cnl import CnlModel, Dataset, ParameterVector, choice_probabilities, prepare
from .errors import DomainError

LOW_EXPECTED = 5.0


@dataclass(frozen=True)
class ValidationReport:
    labels: tuple[str, ...]  # all cells, canonical order
    observed: np.ndarray
    expected: np.ndarray
    cells: tuple[int, ...]  # 1-based cells entering the statistic
    statistic: float
    df: int
    p_value: float
    critical_95: float
    critical_99: float
    warnings: tuple[str, ...] = ()

    @property
    def reject_95(self) -> bool:
        return self.statistic > self.critical_95

    @property
    def reject_99(self) -> bool:
        return self.statistic > self.critical_99

    def summary(self) -> str:
        lo, hi = min(self.cells), max(self.cells)
        span = f"{lo}-{hi}" if list(self.cells) == list(range(lo, hi + 1)) else ",".join(map(str, self.cells))
        lines = [
            f"chi-square over cells {span}: {self.statistic:.4f} on {self.df} df (p = {self.p_value:.4g})",
            f"  95% critical {self.critical_95:.3f}: {'reject' if self.reject_95 else 'do not reject'}",
            f"  99% critical {self.critical_99:.3f}: {'reject' if self.reject_99 else 'do not reject'}",
        ]
        lines += [f"  warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def split_dataset(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random (estimation, validation) partition.

    The validation part has ``floor(N * fraction + 0.5)`` observations; both
    parts keep the original observation order.
    """
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"holdout fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    n_val = math.floor(n * fraction + 0.5)
    if n_val == 0 or n_val == n:
        raise DomainError(f"fraction {fraction} of {n} observations leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    val = np.sort(perm[:n_val])
    est = np.sort(perm[n_val:])
    return (
        dataset.subset(est.tolist(), f"{dataset.provenance} | estimation part (seed={seed})"),
        dataset.subset(val.tolist(), f"{dataset.provenance} | validation part (seed={seed})"),
    )


def predicted_frequencies(model: CnlModel, theta: ParameterVector | np.ndarray, dataset: Dataset) -> np.ndarray:
    """Expected number of choices of each alternative, sum_n P_n(i)."""
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    P = choice_probabilities(model, theta, prepare(model, dataset))
    return P.sum(axis=0)


def observed_frequencies(dataset: Dataset, choiceset: ChoiceSet) -> np.ndarray:
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    counts = np.zeros(len(choiceset), dtype=np.int64)
    for obs in dataset:
        counts[choiceset.position(obs.chosen)] += 1
    return counts


def parse_cell_range(text: str, n_cells: int) -> tuple[int, ...]:
    """``all``, ``a-b`` or a comma list of 1-based cells (ranges allowed)."""
    text = text.strip()
    if text == "all":
        return tuple(range(1, n_cells + 1))
    cells: list[int] = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                cells.extend(range(lo, hi + 1))
            else:
                cells.append(int(part))
        except ValueError:
            raise DomainError(f"bad cell range {text!r}") from None
    if not cells or len(set(cells)) != len(cells) or min(cells) < 1 or max(cells) > n_cells:
        raise DomainError(f"cell range {text!r} invalid for {n_cells} cells")
    return tuple(cells)


def chi_square_test(
    observed: Sequence[float],
    expected: Sequence[float],
    cell_range: Iterable[int] | str | None = None,
    labels: Sequence[str] | None = None,
) -> ValidationReport:
    """Pearson statistic sum (O - E)^2 / E over the 1-based ``cell_range``.

    Cells with expected count below 5 are reported but not merged; merging
    is left to the caller because it changes the degrees of freedom.
    """
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    if O.shape != E.shape or O.ndim != 1:
        raise DomainError("observed and expected vectors differ in shape")
    if cell_range is None:
        cells = tuple(range(1, len(O) + 1))
    elif isinstance(cell_range, str):
        cells = parse_cell_range(cell_range, len(O))
    else:
        cells = tuple(int(c) for c in cell_range)
        if not cells or min(cells) < 1 or max(cells) > len(O) or len(set(cells)) != len(cells):
            raise DomainError("cell range outside the frequency vectors")
    if len(cells) < 2:
        raise DomainError("chi-square test needs at least two cells")
    idx = np.array(cells) - 1
    labels = tuple(labels) if labels is not None else tuple(str(i + 1) for i in range(len(O)))
    if np.any(E[idx] <= 0):
        bad = [labels[i] for i in idx if E[i] <= 0]
        raise DomainError(f"zero expected count in cells {bad}; merge or drop them")
    notes = []
    low = [labels[i] for i in idx if E[i] < LOW_EXPECTED]
    if low:
        msg = f"expected count below {LOW_EXPECTED:g} in cells {low}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    stat = float(np.sum((O[idx] - E[idx]) ** 2 / E[idx]))
    df = len(cells) - 1
    return ValidationReport(
        labels=labels,
        observed=O,
        expected=E,
        cells=cells,
        statistic=stat,
        df=df,
        p_value=float(chi2.sf(stat, df)),
        critical_95=float(chi2.ppf(0.95, df)),
        critical_99=float(chi2.ppf(0.99, df)),
        warnings=tuple(notes),
    )


def validate(
    model: CnlModel,
    theta: ParameterVector | np.ndarray,
    dataset: Dataset,
    cell_range: Iterable[int] | str | None = None,
) -> ValidationReport:
    O = observed_frequencies(dataset, model.choiceset)
    E = predicted_frequencies(model, theta, dataset)
    return chi_square_test(O, E, cell_range, model.choiceset.labels)


@dataclass(frozen=True)
class GroupSummary:
    group: str
    median: float
    q1: float
    q3: float


def param_group_summary(
    estimates: Mapping[str, float], groups: Mapping[str, Sequence[str]]
) -> list[GroupSummary]:
    """Median and quartiles (linear interpolation) of each group's point estimates."""
    if hasattr(estimates, "as_dict"):
        estimates = estimates.as_dict()
    out = []
    for group, names in groups.items():
        if not names:
            raise DomainError(f"group {group!r} is empty")
        missing = [n for n in names if n not in estimates]
        if missing:
            raise DomainError(f"group {group!r} names unknown parameters {missing}")
        v = np.array([estimates[n] for n in names], dtype=float)
        q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
        out.append(GroupSummary(group, float(med), float(q1), float(q3)))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def frequency_csv(report: ValidationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["combination", "observed", "expected"])
    for label, o, e in zip(report.labels, report.observed, report.expected):
        w.writerow([label, int(o) if float(o).is_integer() else _fmt(o), _fmt(e)])
    return buf.getvalue()


def group_summary_csv(rows: Sequence[GroupSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "median", "q1", "q3"])
    for r in rows:
        w.writerow([r.group, _fmt(r.median), _fmt(r.q1), _fmt(r.q3)])
    return buf.getvalue()
