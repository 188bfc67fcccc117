"""Independent reference computations shared by the test modules.

Nothing here calls the package's probability kernel; the CNL oracle works
directly from the generating function in linear space.
"""

from __future__ import annotations

import numpy as np

from travelshare.choiceset import DEFAULT_NESTS, Combination, enumerate_combinations
from travelshare.cnl import (
    CnlModel,
    CnlStructure,
    Dataset,
    Observation,
    Predicate,
    UtilitySpec,
    UtilityTerm,
)


def cnl_oracle(alpha: np.ndarray, V: np.ndarray, mu: np.ndarray, avail: np.ndarray | None = None) -> np.ndarray:
    """P_i = y_i dG/dy_i / G with G = sum_m (sum_j (a_jm y_j)^mu_m)^(1/mu_m), y = exp(V)."""
    V = np.asarray(V, dtype=float)
    y = np.exp(V - V.max())
    if avail is not None:
        y = np.where(avail, y, 0.0)
    J, M = alpha.shape
    G = 0.0
    dG = np.zeros(J)
    for m in range(M):
        terms = (alpha[:, m] * y) ** mu[m]
        s = terms.sum()
        if s == 0:
            continue
        G += s ** (1.0 / mu[m])
        # y_j d/dy_j of s^(1/mu): s^(1/mu - 1) * (a_jm y_j)^mu
        dG += s ** (1.0 / mu[m] - 1.0) * terms
    return dG / G


def mnl(V: np.ndarray) -> np.ndarray:
    e = np.exp(V - np.max(V))
    return e / e.sum()


def central_gradient(f, x: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(len(x)):
        h = rel * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


COVS = ("c1", "c2", "c3", "c4")


def random_instance(rng: np.random.Generator, n_obs: int = 40, n_asc: int = 16, n_beta: int = 4):
    """31 alternatives, 5 free nest scales, ``n_asc`` constants and ``n_beta`` covariate terms.

    Returns (model, dataset, theta) with theta in the optimiser space.
    """
    cs = enumerate_combinations(DEFAULT_NESTS)
    ref = cs[0]
    others = list(cs)[1:]
    picks = rng.choice(len(others), size=n_asc, replace=False)
    terms = [UtilityTerm.asc(others[i]) for i in sorted(picks)]
    codes = [n.code for n in DEFAULT_NESTS]
    for k in range(n_beta):
        cov = COVS[k % len(COVS)]
        kind = rng.integers(3)
        if kind == 0:
            pred = Predicate("contains", codes[rng.integers(5)])
            terms.append(UtilityTerm.beta(f"b{k}", cov, pred))
        elif kind == 1:
            pred = Predicate("alt", others[rng.integers(len(others))].label)
            terms.append(UtilityTerm.beta(f"b{k}", cov, pred))
        else:
            terms.append(UtilityTerm.nest_count(f"b{k}", cov))
    spec = UtilitySpec.build(terms, ref, covariates=COVS)
    model = CnlModel(CnlStructure(cs), spec)
    obs = []
    full = (1 << len(cs)) - 1
    for n in range(n_obs):
        covs = {c: float(rng.normal()) for c in COVS}
        avail = None
        if rng.random() < 0.3:
            avail = full & ~int(rng.integers(0, 1 << len(cs)))
        chosen_pos = rng.integers(len(cs))
        if avail is not None:
            avail |= 1 << chosen_pos
        obs.append(Observation(f"o{n}", cs[chosen_pos], covs, avail))
    values = {}
    for t in spec.free_terms:
        values[t.parameter] = float(rng.normal(0, 0.7))
    for n in DEFAULT_NESTS:
        values[f"mu_{n.code}"] = float(rng.uniform(1.05, 3.0))
    return model, Dataset(tuple(obs)), model.theta(values)


def two_nest_model():
    """Three alternatives a1 = A, a2 = B, a3 = A+B with equal split for a3."""
    from travelshare.choiceset import NestId

    nests = (NestId("A"), NestId("B"))
    cs = enumerate_combinations(nests)
    return cs, Combination(1, nests)
