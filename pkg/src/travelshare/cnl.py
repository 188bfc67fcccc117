"""Cross-nested logit engine: utilities, probabilities, likelihood, gradient.

The generating function is

    G(y) = sum_m ( sum_j (alpha_jm * y_j) ** mu_m ) ** (1 / mu_m)

with the top scale fixed to one and every nest scale ``mu_m >= 1``.  All
inner sums are evaluated as log-sum-exp with a max shift, so utilities of
several hundred in magnitude are harmless.

Nest scales enter the free parameter vector through the transform
``mu = 1 + softplus(eta)``; gradients are reported with respect to ``eta``.
"""

from __future__ import annotations

import math
import os
import warnings
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .choiceset import PASSIVE, ChoiceSet, Combination, NestId
from .errors import DataError, DomainError, NumericError, ZeroProbabilityWarning

CHUNK_SIZE = 2048
THREADS_ENV = "TRAVELSHARE_THREADS"


# ---------------------------------------------------------------------------
# scale transform


def scale_from_free(eta: np.ndarray | float) -> np.ndarray:
    return 1.0 + np.logaddexp(0.0, eta)


def free_from_scale(mu: np.ndarray | float) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 1.0):
        raise DomainError("free nest scales must be strictly greater than 1")
    excess = mu - 1.0
    # log(expm1(x)) loses precision for large x
    return np.where(excess > 30.0, excess + np.log1p(-np.exp(-excess)), np.log(np.expm1(excess)))


def scale_jacobian(eta: np.ndarray | float) -> np.ndarray:
    """d mu / d eta."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(eta, dtype=float)))


# ---------------------------------------------------------------------------
# utility specification


@dataclass(frozen=True)
class Predicate:
    """Membership test on a combination: ``contains(code)``, ``alt(label)`` or ``any``."""

    kind: str
    arg: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("contains", "alt", "any"):
            raise DomainError(f"unknown predicate {self.kind!r}")

    def __call__(self, c: Combination) -> bool:
        if self.kind == "contains":
            return c.contains(self.arg)
        if self.kind == "alt":
            return c.label == self.arg
        return True

    def __str__(self) -> str:
        return "any" if self.kind == "any" else f"{self.kind}({self.arg})"


@dataclass(frozen=True)
class UtilityTerm:
    """One linear term of the systematic utility.

    ``kind`` is ``"asc"`` (constant of ``combination``), ``"beta"``
    (``covariate`` on alternatives satisfying ``predicate``) or
    ``"nest_count"`` (``covariate`` times the number of nests in the
    alternative).
    """

    kind: str
    parameter: str
    combination: Combination | None = None
    covariate: str | None = None
    predicate: Predicate | None = None
    fixed: bool = False
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "asc":
            if self.combination is None:
                raise DomainError(f"ASC term {self.parameter!r} needs a combination")
        elif self.kind == "beta":
            if self.covariate is None or self.predicate is None:
                raise DomainError(f"beta term {self.parameter!r} needs a covariate and a predicate")
        elif self.kind == "nest_count":
            if self.covariate is None:
                raise DomainError(f"nest-count term {self.parameter!r} needs a covariate")
        else:
            raise DomainError(f"unknown utility term kind {self.kind!r}")
        if not math.isfinite(self.value):
            raise DomainError(f"non-finite value for {self.parameter!r}")

    @classmethod
    def asc(cls, combination: Combination, parameter: str | None = None, **kw) -> "UtilityTerm":
        return cls("asc", parameter or f"asc_{combination.label}", combination=combination, **kw)

    @classmethod
    def beta(cls, parameter: str, covariate: str, predicate: Predicate, **kw) -> "UtilityTerm":
        return cls("beta", parameter, covariate=covariate, predicate=predicate, **kw)

    @classmethod
    def nest_count(cls, parameter: str, covariate: str, **kw) -> "UtilityTerm":
        return cls("nest_count", parameter, covariate=covariate, **kw)

    def multiplier(self, alt: Combination) -> float:
        """Alternative-side factor of the term (0 when it does not apply)."""
        if self.kind == "asc":
            return 1.0 if alt == self.combination else 0.0
        if self.kind == "beta":
            return 1.0 if self.predicate(alt) else 0.0
        return float(alt.size)


@dataclass(frozen=True)
class UtilitySpec:
    terms: tuple[UtilityTerm, ...]
    covariates: tuple[str, ...]
    reference: Combination

    def __post_init__(self) -> None:
        names = [t.parameter for t in self.terms]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise DomainError(f"duplicate parameter names: {dup}")
        registry = set(self.covariates)
        for t in self.terms:
            if t.covariate is not None and t.covariate not in registry:
                raise DomainError(f"covariate {t.covariate!r} of {t.parameter!r} is not registered")
        zero_ascs = [t for t in self.terms if t.kind == "asc" and t.fixed and t.value == 0.0]
        if len(zero_ascs) != 1 or zero_ascs[0].combination != self.reference:
            raise DomainError(
                f"exactly one ASC must be fixed to 0 and it must be the reference {self.reference.label}"
            )

    @classmethod
    def build(
        cls,
        terms: Iterable[UtilityTerm],
        reference: Combination | None = None,
        covariates: Iterable[str] | None = None,
    ) -> "UtilitySpec":
        """Assemble a spec, adding the zero-fixed reference constant.

        A free constant on the reference alternative is rejected.
        """
        terms = list(terms)
        if reference is None:
            nests = next((t.combination.nests for t in terms if t.combination is not None), None)
            reference = Combination.of([PASSIVE]) if nests is None else Combination(1, nests)
        ref_terms = [t for t in terms if t.kind == "asc" and t.combination == reference]
        if any(not t.fixed or t.value != 0.0 for t in ref_terms):
            raise DomainError(f"ASC of the reference alternative {reference.label} must be fixed to 0")
        if not ref_terms:
            terms.insert(0, UtilityTerm.asc(reference, fixed=True, value=0.0))
        if covariates is None:
            seen: dict[str, None] = {}
            for t in terms:
                if t.covariate is not None:
                    seen.setdefault(t.covariate)
            covariates = tuple(seen)
        return cls(tuple(terms), tuple(covariates), reference)

    @property
    def free_terms(self) -> tuple[UtilityTerm, ...]:
        return tuple(t for t in self.terms if not t.fixed)

    @property
    def n_free(self) -> int:
        return len(self.free_terms)

    @property
    def used_covariates(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.terms:
            if t.covariate is not None:
                seen.setdefault(t.covariate)
        return tuple(seen)


def asc_terms(choiceset: ChoiceSet, reference: Combination) -> list[UtilityTerm]:
    """One free constant per alternative except the reference."""
    return [UtilityTerm.asc(c) for c in choiceset if c != reference]


# ---------------------------------------------------------------------------
# structure and model


@dataclass(frozen=True)
class CnlStructure:
    choiceset: ChoiceSet
    scale_init: tuple[float, ...] | None = None
    scale_fixed: tuple[bool, ...] | None = None
    top_scale: float = 1.0
    alpha: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        m = len(self.choiceset.nests)
        init = tuple(float(v) for v in (self.scale_init or (1.5,) * m))
        fixed = tuple(bool(v) for v in (self.scale_fixed or (False,) * m))
        if len(init) != m or len(fixed) != m:
            raise DomainError(f"expected {m} nest scales")
        if self.top_scale != 1.0:
            raise DomainError("top scale is normalised to 1")
        for v, f, nest in zip(init, fixed, self.choiceset.nests):
            if not math.isfinite(v) or v < self.top_scale:
                raise DomainError(f"nest scale for {nest.code} must be >= 1, got {v}")
            if not f and v == 1.0:
                raise DomainError(f"free nest scale for {nest.code} must start above 1")
        object.__setattr__(self, "scale_init", init)
        object.__setattr__(self, "scale_fixed", fixed)
        alpha = self.choiceset.allocation_matrix()
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def nests(self) -> tuple[NestId, ...]:
        return self.choiceset.nests


@dataclass(frozen=True)
class ParameterVector:
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (len(self.names),):
            raise DomainError("parameter names and values differ in length")
        if not np.all(np.isfinite(values)):
            raise NumericError("non-finite parameter value")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __len__(self) -> int:
        return len(self.names)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


@dataclass(frozen=True, eq=False)
class CnlModel:
    structure: CnlStructure
    spec: UtilitySpec

    def __post_init__(self) -> None:
        cs = self.structure.choiceset
        for t in self.spec.terms:
            if t.kind == "asc" and t.combination not in cs:
                raise DomainError(f"ASC {t.parameter!r} refers to {t.combination.label}, not in the choice set")
            if t.kind == "beta" and t.predicate.kind == "alt":
                cs.parse(t.predicate.arg)
        if self.spec.reference not in cs:
            raise DomainError(f"reference alternative {self.spec.reference.label} is not in the choice set")

    @property
    def choiceset(self) -> ChoiceSet:
        return self.structure.choiceset

    @property
    def free_scale_positions(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.structure.scale_fixed) if not f)

    @property
    def parameter_names(self) -> tuple[str, ...]:
        nests = self.structure.nests
        return tuple(t.parameter for t in self.spec.free_terms) + tuple(
            f"mu_{nests[m].code}" for m in self.free_scale_positions
        )

    @property
    def n_free(self) -> int:
        return self.spec.n_free + len(self.free_scale_positions)

    def initial_theta(self) -> ParameterVector:
        beta0 = [t.value for t in self.spec.free_terms]
        mu0 = [self.structure.scale_init[m] for m in self.free_scale_positions]
        return ParameterVector(self.parameter_names, np.concatenate([beta0, free_from_scale(mu0)]))

    def theta(self, values: Mapping[str, float]) -> ParameterVector:
        """Build a parameter vector from natural-scale values (``mu_X`` given as mu)."""
        out = []
        nb = self.spec.n_free
        for i, name in enumerate(self.parameter_names):
            v = float(values[name])
            out.append(float(free_from_scale(v)) if i >= nb else v)
        return ParameterVector(self.parameter_names, np.array(out))

    def _values(self, theta: ParameterVector | np.ndarray) -> np.ndarray:
        values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float)
        if values.shape != (self.n_free,):
            raise DomainError(f"expected {self.n_free} free parameters, got {values.shape}")
        return values

    def coefficients(self, theta: ParameterVector | np.ndarray) -> np.ndarray:
        """Coefficient of every utility term, fixed ones included."""
        values = self._values(theta)
        out = np.empty(len(self.spec.terms))
        k = 0
        for i, t in enumerate(self.spec.terms):
            if t.fixed:
                out[i] = t.value
            else:
                out[i] = values[k]
                k += 1
        return out

    def scales(self, theta: ParameterVector | np.ndarray) -> np.ndarray:
        values = self._values(theta)
        mu = np.array(self.structure.scale_init, dtype=float)
        pos = list(self.free_scale_positions)
        if pos:
            mu[pos] = scale_from_free(values[self.spec.n_free:])
        return mu

    def natural(self, theta: ParameterVector | np.ndarray) -> dict[str, float]:
        """Named values with nest scales back-transformed."""
        values = self._values(theta).copy()
        nb = self.spec.n_free
        values[nb:] = scale_from_free(values[nb:])
        return dict(zip(self.parameter_names, values.tolist()))


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Observation:
    id: str
    chosen: Combination
    covariates: Mapping[str, float] = field(default_factory=dict)
    availability: int | None = None

    def available(self, position: int) -> bool:
        return self.availability is None or bool(self.availability >> position & 1)


@dataclass(frozen=True, eq=False)
class Dataset:
    observations: tuple[Observation, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "observations", tuple(self.observations))
        ids = [o.id for o in self.observations]
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError(f"duplicate observation id {dup!r}")

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def ids(self) -> list[str]:
        return [o.id for o in self.observations]

    def subset(self, indices: Sequence[int], provenance: str | None = None) -> "Dataset":
        return Dataset(
            tuple(self.observations[i] for i in indices),
            self.provenance if provenance is None else provenance,
        )


def complete_cases(dataset: Dataset, covariates: Iterable[str]) -> tuple[Dataset, list[str]]:
    """Drop observations lacking any of ``covariates``; returns the kept data and dropped ids."""
    names = tuple(covariates)
    kept, dropped = [], []
    for obs in dataset:
        ok = all(name in obs.covariates and math.isfinite(obs.covariates[name]) for name in names)
        (kept if ok else dropped).append(obs)
    return Dataset(tuple(kept), dataset.provenance), [o.id for o in dropped]


# ---------------------------------------------------------------------------
# utilities


def systematic_utility(
    spec: UtilitySpec,
    theta: ParameterVector | Mapping[str, float],
    obs: Observation,
    alt: Combination,
) -> float:
    """Utility of ``alt`` for ``obs`` evaluated term by term."""
    values = theta.as_dict() if isinstance(theta, ParameterVector) else theta
    v = 0.0
    for t in spec.terms:
        mult = t.multiplier(alt)
        if t.kind != "asc":
            x = obs.covariates.get(t.covariate)
            if x is None or not math.isfinite(x):
                raise DataError(f"observation {obs.id!r} lacks covariate {t.covariate!r}")
            mult *= x
        if mult == 0.0:
            continue
        try:
            coef = t.value if t.fixed else values[t.parameter]
        except KeyError:
            raise DomainError(f"no value for parameter {t.parameter!r}") from None
        v += coef * mult
    if not math.isfinite(v):
        raise NumericError(f"non-finite utility for observation {obs.id!r}, alternative {alt.label}")
    return v


@dataclass(frozen=True, eq=False)
class Prepared:
    """Dense arrays for one (model, dataset) pair."""

    ids: tuple[str, ...]
    chosen: np.ndarray  # (N,) positions in the choice set
    avail: np.ndarray  # (N, J) bool
    X: np.ndarray  # (N, T) covariate value per term, 1 for constants
    A: np.ndarray  # (T, J) alternative multiplier per term

    @property
    def n(self) -> int:
        return len(self.ids)


_prepared_cache: "weakref.WeakKeyDictionary[Dataset, dict]" = weakref.WeakKeyDictionary()


def prepare(model: CnlModel, dataset: Dataset) -> Prepared:
    per_model = _prepared_cache.setdefault(dataset, {})
    key = id(model)
    hit = per_model.get(key)
    if hit is not None and hit[0]() is model:
        return hit[1]
    prepared = _prepare(model, dataset)
    per_model[key] = (weakref.ref(model), prepared)
    return prepared


def _prepare(model: CnlModel, dataset: Dataset) -> Prepared:
    cs = model.choiceset
    terms = model.spec.terms
    n, j = len(dataset), len(cs)
    chosen = np.empty(n, dtype=np.intp)
    avail = np.ones((n, j), dtype=bool)
    X = np.ones((n, len(terms)))
    A = np.array([[t.multiplier(c) for c in cs] for t in terms]).reshape(len(terms), j)
    bits = np.arange(j)
    for r, obs in enumerate(dataset):
        try:
            pos = cs.position(obs.chosen)
        except DomainError:
            raise DataError(f"observation {obs.id!r} chose {obs.chosen.label}, not in the choice set") from None
        chosen[r] = pos
        if obs.availability is not None:
            avail[r] = (obs.availability >> bits) & 1 == 1
            if not avail[r, pos]:
                raise DataError(f"observation {obs.id!r}: chosen alternative {obs.chosen.label} is unavailable")
        for k, t in enumerate(terms):
            if t.kind == "asc":
                continue
            x = obs.covariates.get(t.covariate)
            if x is None or not math.isfinite(x):
                raise DataError(f"observation {obs.id!r} lacks covariate {t.covariate!r}")
            X[r, k] = x
    for arr in (chosen, avail, X, A):
        arr.setflags(write=False)
    return Prepared(tuple(dataset.ids), chosen, avail, X, A)


def utilities(model: CnlModel, theta: ParameterVector | np.ndarray, data: Prepared) -> np.ndarray:
    """(N, J) systematic utilities."""
    b = model.coefficients(theta)
    V = (data.X * b) @ data.A
    if not np.all(np.isfinite(V)):
        bad = np.flatnonzero(~np.all(np.isfinite(V), axis=1))
        raise NumericError(f"non-finite utilities for observations {[data.ids[i] for i in bad[:10]]}")
    return V


# ---------------------------------------------------------------------------
# probabilities
#
# Kernels work on the sparse list of (alternative, nest) pairs with positive
# allocation, sorted by nest so that per-nest reductions are reduceat calls.


@dataclass(frozen=True, eq=False)
class _Layout:
    pair_j: np.ndarray  # (P,)
    pair_m: np.ndarray  # (P,)
    starts: np.ndarray  # (M,) first pair of each nest
    log_alpha_pairs: np.ndarray  # (P,)
    log_alpha: np.ndarray  # (J, M), -inf off-membership
    member: np.ndarray  # (J, M) bool
    to_alt: np.ndarray  # (P, J) indicator

    @classmethod
    def of(cls, alpha: np.ndarray) -> "_Layout":
        member = alpha > 0
        if not np.all(member.any(axis=0)):
            raise DomainError("every nest needs at least one member alternative")
        m_idx, j_idx = np.nonzero(member.T)
        with np.errstate(divide="ignore"):
            log_alpha = np.log(alpha)
        starts = np.searchsorted(m_idx, np.arange(alpha.shape[1]))
        to_alt = np.zeros((len(j_idx), alpha.shape[0]))
        to_alt[np.arange(len(j_idx)), j_idx] = 1.0
        return cls(j_idx, m_idx, starts, log_alpha[j_idx, m_idx], log_alpha, member, to_alt)


_layouts: "weakref.WeakKeyDictionary[CnlStructure, _Layout]" = weakref.WeakKeyDictionary()


def _layout(structure: CnlStructure) -> _Layout:
    lay = _layouts.get(structure)
    if lay is None:
        lay = _layouts[structure] = _Layout.of(structure.alpha)
    return lay


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _check_scales(mu: np.ndarray, top: float = 1.0) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)) or np.any(mu < top):
        raise DomainError(f"nest scales must be finite and >= {top}, got {mu}")
    return mu


@dataclass
class _Nests:
    y: np.ndarray  # (n, P) mu_m (ln alpha_jm + V_j), -inf when unavailable
    e: np.ndarray  # (n, P) exp(y - per-nest max)
    s: np.ndarray  # (n, M) sum of e per nest
    S: np.ndarray  # (n, M) log sum_j exp(y), -inf for empty nests
    logPm: np.ndarray  # (n, M) log nest probability


def _nests(lay: _Layout, V: np.ndarray, avail: np.ndarray, mu: np.ndarray) -> _Nests:
    pj, pm = lay.pair_j, lay.pair_m
    y = np.where(avail[:, pj], mu[pm] * (lay.log_alpha_pairs + V[:, pj]), -np.inf)
    top = np.maximum.reduceat(y, lay.starts, axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(y - top[:, pm])
    s = np.add.reduceat(e, lay.starts, axis=1)
    with np.errstate(divide="ignore"):
        S = np.log(s) + top
    live = np.isfinite(S)
    inclusive = np.where(live, S / mu, -np.inf)
    logPm = inclusive - _lse(inclusive, axis=1)[:, None]
    return _Nests(y, e, s, S, logPm)


def _all_probabilities(lay: _Layout, V: np.ndarray, avail: np.ndarray, mu: np.ndarray) -> np.ndarray:
    nst = _nests(lay, V, avail, mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(nst.s[:, lay.pair_m] > 0, nst.e / nst.s[:, lay.pair_m], 0.0)
    P = (np.exp(nst.logPm)[:, lay.pair_m] * q) @ lay.to_alt
    return np.where(avail, P, 0.0)


def _as_mask(availability, j: int) -> np.ndarray:
    if availability is None:
        return np.ones(j, dtype=bool)
    if isinstance(availability, (int, np.integer)):
        return (int(availability) >> np.arange(j)) & 1 == 1
    mask = np.asarray(availability, dtype=bool)
    if mask.shape != (j,):
        raise DomainError(f"availability must have {j} entries")
    return mask


def cnl_probabilities(
    structure: CnlStructure,
    V: Sequence[float],
    availability=None,
    scales: Sequence[float] | None = None,
) -> np.ndarray:
    """Choice probabilities for one decision maker.

    ``scales`` defaults to the structure's initial nest scales.
    ``availability`` is a boolean vector, an integer bitmask over the choice
    set positions, or None for all available.
    """
    V = np.asarray(V, dtype=float)
    j = len(structure.choiceset)
    if V.shape != (j,):
        raise DomainError(f"expected {j} utilities, got shape {V.shape}")
    mask = _as_mask(availability, j)
    if not mask.any():
        raise DomainError("no alternative is available")
    if not np.all(np.isfinite(V[mask])):
        raise NumericError("non-finite utility for an available alternative")
    mu = _check_scales(structure.scale_init if scales is None else scales, structure.top_scale)
    V = np.where(mask, V, 0.0)
    return _all_probabilities(_layout(structure), V[None, :], mask[None, :], mu)[0]


def batch_probabilities(
    structure: CnlStructure, V: np.ndarray, avail: np.ndarray | None, scales: Sequence[float]
) -> np.ndarray:
    """Row-wise probabilities for an (N, J) utility matrix."""
    V = np.asarray(V, dtype=float)
    avail = np.ones(V.shape, dtype=bool) if avail is None else np.asarray(avail, dtype=bool)
    if not np.all(avail.any(axis=1)):
        raise DomainError("some observation has no available alternative")
    mu = _check_scales(scales, structure.top_scale)
    lay = _layout(structure)
    out = np.empty_like(V)
    for s in range(0, len(V), CHUNK_SIZE):
        sl = slice(s, s + CHUNK_SIZE)
        out[sl] = _all_probabilities(lay, V[sl], avail[sl], mu)
    return out


def choice_probabilities(model: CnlModel, theta: ParameterVector | np.ndarray, data: Prepared) -> np.ndarray:
    """(N, J) probability matrix for every observation."""
    V = utilities(model, theta, data)
    return batch_probabilities(model.structure, V, data.avail, model.scales(theta))


# ---------------------------------------------------------------------------
# likelihood and gradient


def _chunk(lay: _Layout, V, avail, chosen, X, A, mu, want_grad):
    """Chosen log-probabilities and, optionally, per-observation scores.

    Scores are returned with respect to every utility term coefficient and
    every nest scale (natural scale).
    """
    nst = _nests(lay, V, avail, mu)
    rows = np.arange(len(chosen))
    Vi = V[rows, chosen]
    member_i = lay.member[chosen]
    live = np.isfinite(nst.S)
    with np.errstate(invalid="ignore"):
        ui = np.where(member_i, lay.log_alpha[chosen] + Vi[:, None], 0.0)
        logQi = np.where(member_i & live, mu * ui - nst.S, -np.inf)
    logp = _lse(nst.logPm + logQi, axis=1)
    if not want_grad:
        return logp, None, None
    with np.errstate(invalid="ignore", over="ignore"):
        w = np.exp(nst.logPm + logQi - logp[:, None])
    w = np.where(np.isfinite(w), w, 0.0)
    pm = lay.pair_m
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = np.where(nst.s[:, pm] > 0, nst.e / nst.s[:, pm], 0.0)
    Pm = np.exp(nst.logPm)
    coef = w * (mu - 1.0) + Pm
    G = -((coef[:, pm] * Q) @ lay.to_alt)
    G[rows, chosen] += w @ mu
    s_terms = X * (G @ A.T)
    u = lay.log_alpha_pairs + V[:, lay.pair_j]
    ubar = np.add.reduceat(Q * u, lay.starts, axis=1)
    S = np.where(live, nst.S, 0.0)
    s_mu = w * (ui - ubar) + (w - Pm) * (ubar / mu - S / mu**2)
    return logp, s_terms, s_mu


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _evaluate(model: CnlModel, theta, data: Prepared, want_grad: bool, mu: np.ndarray | None = None):
    if data.n == 0:
        raise DomainError("empty dataset")
    V = utilities(model, theta, data)
    mu = _check_scales(model.scales(theta) if mu is None else mu)
    lay = _layout(model.structure)
    starts = range(0, data.n, CHUNK_SIZE)

    def run(s):
        sl = slice(s, s + CHUNK_SIZE)
        return _chunk(lay, V[sl], data.avail[sl], data.chosen[sl], data.X[sl], data.A, mu, want_grad)

    threads = _thread_count()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, starts))
    return [run(s) for s in starts]


def _report_zero(data: Prepared, logp: np.ndarray) -> None:
    bad = [data.ids[i] for i in np.flatnonzero(np.isneginf(logp))]
    if bad:
        warnings.warn(
            ZeroProbabilityWarning(f"{len(bad)} chosen alternatives have zero probability: {bad[:20]}"),
            stacklevel=3,
        )


def _data(model, dataset) -> Prepared:
    return dataset if isinstance(dataset, Prepared) else prepare(model, dataset)


def _total(logp: np.ndarray, data: Prepared) -> float:
    if np.any(np.isnan(logp)):
        raise NumericError("NaN in log-probabilities")
    if np.any(np.isneginf(logp)):
        _report_zero(data, logp)
        return -math.inf
    return math.fsum(logp.tolist())


def log_likelihood(model: CnlModel, theta: ParameterVector | np.ndarray, dataset: Dataset | Prepared) -> float:
    data = _data(model, dataset)
    parts = _evaluate(model, theta, data, want_grad=False)
    return _total(np.concatenate([p[0] for p in parts]), data)


def _free_columns(model: CnlModel, theta, s_terms: np.ndarray, s_mu: np.ndarray, natural: bool) -> np.ndarray:
    free = [i for i, t in enumerate(model.spec.terms) if not t.fixed]
    pos = list(model.free_scale_positions)
    g_mu = s_mu[..., pos]
    if not natural:
        g_mu = g_mu * scale_jacobian(model._values(theta)[model.spec.n_free:])
    return np.concatenate([s_terms[..., free], g_mu], axis=-1)


def loglik_and_gradient(
    model: CnlModel,
    theta: ParameterVector | np.ndarray,
    dataset: Dataset | Prepared,
    natural: bool = False,
) -> tuple[float, np.ndarray]:
    """Log-likelihood and its analytic gradient.

    The gradient is taken in the optimiser space (``eta`` for nest scales)
    unless ``natural`` is set, in which case scale entries are d/d mu.
    """
    data = _data(model, dataset)
    parts = _evaluate(model, theta, data, want_grad=True)
    ll = _total(np.concatenate([p[0] for p in parts]), data)
    if not math.isfinite(ll):
        return ll, np.full(model.n_free, np.nan)
    g_terms = np.zeros(len(model.spec.terms))
    g_mu = np.zeros(len(model.structure.nests))
    for _, st, sm in parts:
        g_terms = g_terms + st.sum(axis=0)
        g_mu = g_mu + sm.sum(axis=0)
    return ll, _free_columns(model, theta, g_terms, g_mu, natural)


def natural_gradient(model: CnlModel, values: np.ndarray, dataset: Dataset | Prepared) -> np.ndarray:
    """Gradient with respect to natural-scale parameters (nest scales as mu, mu >= 1 allowed)."""
    data = _data(model, dataset)
    values = np.asarray(values, dtype=float)
    nb = model.spec.n_free
    mu = np.array(model.structure.scale_init, dtype=float)
    mu[list(model.free_scale_positions)] = values[nb:]
    shadow = np.concatenate([values[:nb], np.zeros(len(values) - nb)])
    parts = _evaluate(model, shadow, data, want_grad=True, mu=mu)
    g_terms = np.zeros(len(model.spec.terms))
    g_mu = np.zeros(len(model.structure.nests))
    for _, st, sm in parts:
        g_terms = g_terms + st.sum(axis=0)
        g_mu = g_mu + sm.sum(axis=0)
    return _free_columns(model, shadow, g_terms, g_mu, natural=True)


def gradient(model: CnlModel, theta: ParameterVector | np.ndarray, dataset: Dataset | Prepared) -> np.ndarray:
    """Analytic gradient of the log-likelihood in the free-parameter space."""
    return loglik_and_gradient(model, theta, dataset)[1]


def scores(
    model: CnlModel, theta: ParameterVector | np.ndarray, dataset: Dataset | Prepared, natural: bool = False
) -> np.ndarray:
    """(N, K) per-observation gradients of ln P(chosen)."""
    data = _data(model, dataset)
    parts = _evaluate(model, theta, data, want_grad=True)
    return np.concatenate([_free_columns(model, theta, st, sm, natural) for _, st, sm in parts])


def loglik_function(model: CnlModel, dataset: Dataset) -> Callable[[np.ndarray], float]:
    data = prepare(model, dataset)
    return lambda values: log_likelihood(model, values, data)
