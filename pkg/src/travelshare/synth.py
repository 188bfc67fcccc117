"""Synthetic surveys drawn from a known model, and parameter-recovery runs.

Random streams are derived from ``numpy.random.SeedSequence(seed)`` with the
replication index as spawn key, so replication ``r`` of a configuration is
reproducible on its own and independent of every other replication.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .choiceset import DEFAULT_NESTS, Combination, enumerate_combinations
from .cnl import (
    CnlModel,
    CnlStructure,
    Dataset,
    Observation,
    ParameterVector,
    Predicate,
    UtilitySpec,
    UtilityTerm,
    asc_terms,
    batch_probabilities,
)
from .errors import DomainError
from .estimation import EstimationSettings, estimate

PUBLISHED_SCALES = {"P": 1.81, "L": 2.01, "I": 1.42, "W": 1.11, "O": 1.07}
PUBLISHED_N = 20287


@dataclass(frozen=True)
class CovariateGenerator:
    """One covariate column.

    kinds and their ``params``:

    * ``bernoulli``: (p,)
    * ``categorical``: (p_0, p_1, ...), drawn as the integer code
    * ``uniform``: (low, high)
    * ``normal``: (mean, sd)
    * ``threshold``: 1 where an earlier covariate ``source`` is >= params[0]
    """

    name: str
    kind: str
    params: tuple[float, ...] = ()
    source: str | None = None

    def __post_init__(self) -> None:
        p = self.params
        if self.kind == "bernoulli":
            if len(p) != 1 or not 0.0 <= p[0] <= 1.0:
                raise DomainError(f"{self.name}: bernoulli needs one probability in [0, 1]")
        elif self.kind == "categorical":
            if not p or any(q < 0 for q in p) or not math.isclose(sum(p), 1.0, abs_tol=1e-9):
                raise DomainError(f"{self.name}: categorical probabilities must be >= 0 and sum to 1")
        elif self.kind == "uniform":
            if len(p) != 2 or not p[0] <= p[1]:
                raise DomainError(f"{self.name}: uniform needs low <= high")
        elif self.kind == "normal":
            if len(p) != 2 or p[1] < 0:
                raise DomainError(f"{self.name}: normal needs (mean, sd >= 0)")
        elif self.kind == "threshold":
            if len(p) != 1 or self.source is None:
                raise DomainError(f"{self.name}: threshold needs a source covariate and a cutoff")
        else:
            raise DomainError(f"{self.name}: unknown generator {self.kind!r}")

    def draw(self, rng: np.random.Generator, n: int, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        p = self.params
        if self.kind == "bernoulli":
            return (rng.random(n) < p[0]).astype(float)
        if self.kind == "categorical":
            return rng.choice(len(p), size=n, p=np.asarray(p)).astype(float)
        if self.kind == "uniform":
            return rng.uniform(p[0], p[1], n)
        if self.kind == "normal":
            return rng.normal(p[0], p[1], n)
        if self.source not in columns:
            raise DomainError(f"{self.name}: source {self.source!r} must be generated before it")
        return (columns[self.source] >= p[0]).astype(float)


@dataclass(frozen=True)
class CovariateSpec:
    generators: tuple[CovariateGenerator, ...] = ()

    def __post_init__(self) -> None:
        names = [g.name for g in self.generators]
        if len(set(names)) != len(names):
            raise DomainError("duplicate covariate generator names")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.generators)

    def draw(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        columns: dict[str, np.ndarray] = {}
        for g in self.generators:
            columns[g.name] = g.draw(rng, n, columns)
        return columns


@dataclass(frozen=True)
class GeneratorConfig:
    model: CnlModel
    truth: Mapping[str, float]  # natural scale, nest scales as mu
    covariates: CovariateSpec = field(default_factory=CovariateSpec)
    n: int = PUBLISHED_N
    seed: int = 0
    replications: int = 1

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError("N must be at least 1")
        if self.replications < 1:
            raise DomainError("replication count must be at least 1")
        missing = set(self.model.parameter_names) - set(self.truth)
        if missing:
            raise DomainError(f"no true value for {sorted(missing)}")
        absent = set(self.model.spec.used_covariates) - set(self.covariates.names)
        if absent:
            raise DomainError(f"no generator for covariates {sorted(absent)}")

    @property
    def true_theta(self) -> ParameterVector:
        return self.model.theta(self.truth)

    def true_vector(self) -> np.ndarray:
        return np.array([self.truth[k] for k in self.model.parameter_names], dtype=float)


def replication_rng(seed: int, replication: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replication,)))


def sample_choices(P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw over the columns of each row of ``P``."""
    cum = np.cumsum(P, axis=1)
    idx = np.sum(cum < (u * cum[:, -1])[:, None], axis=1)
    idx = np.minimum(idx, P.shape[1] - 1)
    # guard against landing on a zero-probability tail through rounding
    bad = P[np.arange(len(idx)), idx] <= 0
    if bad.any():
        last = P.shape[1] - 1 - np.argmax(P[:, ::-1] > 0, axis=1)
        idx = np.where(bad, last, idx)
    return idx


def generate_dataset(config: GeneratorConfig, replication: int = 0) -> Dataset:
    model = config.model
    rng = replication_rng(config.seed, replication)
    n = config.n
    columns = config.covariates.draw(rng, n)
    theta = config.true_theta
    b = model.coefficients(theta)
    cs = model.choiceset
    terms = model.spec.terms
    X = np.ones((n, len(terms)))
    for k, t in enumerate(terms):
        if t.covariate is not None:
            X[:, k] = columns[t.covariate]
    A = np.array([[t.multiplier(c) for c in cs] for t in terms])
    V = (X * b) @ A
    P = batch_probabilities(model.structure, V, None, model.scales(theta))
    chosen = sample_choices(P, rng.random(n))
    names = config.covariates.names
    table = np.column_stack([columns[k] for k in names]) if names else np.zeros((n, 0))
    width = len(str(n))
    observations = tuple(
        Observation(str(i + 1).zfill(width), cs[chosen[i]], dict(zip(names, table[i].tolist())))
        for i in range(n)
    )
    return Dataset(observations, f"synthetic seed={config.seed} replication={replication} N={n}")


@dataclass(frozen=True)
class RecoveryRow:
    replication: int
    parameter: str
    true: float
    estimate: float
    se: float
    z: float
    converged: bool


@dataclass(frozen=True)
class ParameterRecovery:
    parameter: str
    true: float
    mean_estimate: float
    bias: float
    coverage: float  # share of replications with |z| <= 1.96
    within_3se: float


@dataclass(frozen=True)
class RecoveryReport:
    rows: tuple[RecoveryRow, ...]
    summary: tuple[ParameterRecovery, ...]
    n_replications: int
    n_converged: int

    def for_replication(self, r: int) -> list[RecoveryRow]:
        return [row for row in self.rows if row.replication == r]

    def summary_for(self, name: str) -> ParameterRecovery:
        return next(s for s in self.summary if s.parameter == name)


def recovery_experiment(
    config: GeneratorConfig,
    settings: EstimationSettings | None = None,
    replications: Sequence[int] | None = None,
) -> RecoveryReport:
    """Generate, estimate and score every replication.

    Non-converged replications stay in the report with ``converged=False``.
    """
    reps = list(range(config.replications)) if replications is None else list(replications)
    truth = config.true_vector()
    names = config.model.parameter_names
    rows = []
    n_conv = 0
    for r in reps:
        data = generate_dataset(config, r)
        res = estimate(config.model, data, settings)
        n_conv += res.converged
        for k, name in enumerate(names):
            est, se = float(res.estimates[k]), float(res.std_errors[k])
            z = (est - truth[k]) / se if math.isfinite(se) and se > 0 else math.nan
            rows.append(RecoveryRow(r, name, float(truth[k]), est, se, z, res.converged))
    summary = []
    for k, name in enumerate(names):
        mine = [row for row in rows if row.parameter == name]
        est = np.array([row.estimate for row in mine])
        z = np.array([row.z for row in mine])
        finite = np.isfinite(z)
        cover = float(np.mean(np.abs(z[finite]) <= 1.96)) if finite.any() else math.nan
        within = float(np.mean(np.abs(z[finite]) <= 3.0)) if finite.any() else math.nan
        summary.append(
            ParameterRecovery(name, float(truth[k]), float(est.mean()), float(est.mean() - truth[k]), cover, within)
        )
    return RecoveryReport(tuple(rows), tuple(summary), len(reps), n_conv)


# ---------------------------------------------------------------------------
# default scenario


_SINGLE_ASC = {"P": 0.0, "L": -0.1, "I": -0.5, "W": -0.9, "O": -0.7}

DEFAULT_COVARIATES = CovariateSpec(
    (
        CovariateGenerator("newspaper", "bernoulli", (0.25,)),
        CovariateGenerator("laptop", "bernoulli", (0.12,)),
        CovariateGenerator("mobile_phone", "bernoulli", (0.7,)),
        CovariateGenerator("food", "bernoulli", (0.3,)),
        CovariateGenerator("companion", "bernoulli", (0.35,)),
        CovariateGenerator("paperwork", "bernoulli", (0.1,)),
        CovariateGenerator("male", "bernoulli", (0.5,)),
        CovariateGenerator("journey_hours", "uniform", (0.25, 3.0)),
        CovariateGenerator("long_journey", "threshold", (1.0,), source="journey_hours"),
    )
)

_DEFAULT_BETAS = (
    ("b_newspaper_L", "newspaper", Predicate("contains", "L"), 0.6),
    ("b_laptop_W", "laptop", Predicate("contains", "W"), 1.0),
    ("b_mobile_I", "mobile_phone", Predicate("contains", "I"), 0.4),
    ("b_food_O", "food", Predicate("contains", "O"), 0.9),
    ("b_companion_I", "companion", Predicate("contains", "I"), 1.1),
    ("b_paperwork_W", "paperwork", Predicate("contains", "W"), 1.2),
    ("b_male_W", "male", Predicate("alt", "W"), 0.3),
)


def default_model() -> CnlModel:
    """Five nests, 31 alternatives, 30 free constants, 8 covariate terms, 5 scales."""
    cs = enumerate_combinations(DEFAULT_NESTS)
    ref = Combination.of(["P"])
    terms = asc_terms(cs, ref)
    terms += [UtilityTerm.beta(name, cov, pred) for name, cov, pred, _ in _DEFAULT_BETAS]
    terms.append(UtilityTerm.nest_count("b_long_count", "long_journey"))
    spec = UtilitySpec.build(terms, ref, covariates=DEFAULT_COVARIATES.names)
    return CnlModel(CnlStructure(cs), spec)


def default_truth(model: CnlModel | None = None) -> dict[str, float]:
    model = model or default_model()
    truth: dict[str, float] = {}
    for t in model.spec.free_terms:
        if t.kind == "asc":
            codes = [m.code for m in t.combination.members]
            # mixtures: a share of their components' appeal, less a per-extra-nest penalty
            truth[t.parameter] = 0.6 * sum(_SINGLE_ASC[c] for c in codes) + (0.9 if len(codes) > 1 else 0.0) - 0.35 * (len(codes) - 1)
    for name, _, _, v in _DEFAULT_BETAS:
        truth[name] = v
    truth["b_long_count"] = 0.15
    for code, mu in PUBLISHED_SCALES.items():
        truth[f"mu_{code}"] = mu
    return truth


def default_scenario(n: int = PUBLISHED_N, seed: int = 2004, replications: int = 1) -> GeneratorConfig:
    model = default_model()
    return GeneratorConfig(model, default_truth(model), DEFAULT_COVARIATES, n, seed, replications)
