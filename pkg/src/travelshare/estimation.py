"""Maximum-likelihood estimation and the summary statistics of a fitted model."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .choiceset import ChoiceSet
from .cnl import (
    CnlModel,
    Dataset,
    ParameterVector,
    Prepared,
    free_from_scale,
    loglik_and_gradient,
    log_likelihood,
    natural_gradient,
    prepare,
    scores,
)
from .errors import DataError, DomainError, EstimationWarning

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimationSettings:
    tolerance: float = 1e-6
    max_iterations: int = 500
    scale_lower_bound: float = 1.0
    initial_values: Mapping[str, float] = field(default_factory=dict)
    holdout_fraction: float = 0.2
    split_seed: int = 0
    hessian_step: float = 1e-5

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise DomainError("tolerance must be positive")
        if self.max_iterations < 0:
            raise DomainError("max_iterations must be >= 0")
        if self.scale_lower_bound != 1.0:
            raise DomainError("nest scales are bounded below by the top scale, 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise DomainError("holdout fraction must lie in [0, 1)")


@dataclass(frozen=True)
class FitStatistics:
    rho2: float
    adj_rho2: float
    lr_statistic: float


@dataclass(frozen=True)
class StandardErrors:
    values: np.ndarray  # NaN marks an absent standard error
    covariance: np.ndarray | None
    status: str  # "ok", "indefinite" or "singular"
    message: str = ""


@dataclass(frozen=True)
class ScaleTest:
    nest: str
    estimate: float
    se: float | None
    t: float | None
    significant: bool | None

    @property
    def testable(self) -> bool:
        return self.t is not None


@dataclass(frozen=True)
class EstimationResult:
    names: tuple[str, ...]
    estimates: np.ndarray  # nest scales on their natural scale
    std_errors: np.ndarray
    covariance: np.ndarray | None
    theta: ParameterVector  # optimiser space
    null_loglik: float
    final_loglik: float
    initial_loglik: float
    iterations: int
    converged: bool
    message: str
    n_obs: int
    gradient_norm: float
    se_status: str = "ok"
    diagnostics: tuple[str, ...] = ()

    @property
    def n_free(self) -> int:
        return len(self.names)

    @property
    def t_stats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.estimates / self.std_errors

    def value(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.std_errors[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.estimates.tolist()))

    @property
    def fit(self) -> FitStatistics:
        return fit_statistics(self.null_loglik, self.final_loglik, self.n_free)


def null_log_likelihood(dataset: Dataset, choiceset: ChoiceSet) -> float:
    """Log-likelihood of the equal-shares model over each observation's available set."""
    if len(dataset) == 0:
        raise DomainError("empty dataset")
    j = len(choiceset)
    terms = []
    for obs in dataset:
        if obs.availability is None:
            count = j
        else:
            count = (obs.availability & ((1 << j) - 1)).bit_count()
        if count == 0:
            raise DataError(f"observation {obs.id!r} has no available alternative")
        terms.append(-math.log(count))
    return math.fsum(terms)


def fit_statistics(L0: float, LB: float, K: int) -> FitStatistics:
    if L0 == 0:
        raise DomainError("null log-likelihood is zero")
    if L0 > 0 or LB > 0:
        raise DomainError("log-likelihoods must be negative")
    if LB < L0:
        raise DomainError(f"final log-likelihood {LB} is below the null value {L0}")
    return FitStatistics(
        rho2=1.0 - LB / L0,
        adj_rho2=1.0 - (LB - K) / L0,
        lr_statistic=2.0 * (LB - L0),
    )


def standard_errors(hessian: np.ndarray, rcond: float = 1e-12) -> StandardErrors:
    """Standard errors from the Hessian of the log-likelihood.

    The covariance is ``(-H)^-1``.  A numerically singular Hessian yields no
    standard errors; an indefinite one falls back to the pseudo-inverse and
    keeps only the entries with a positive variance.
    """
    H = np.asarray(hessian, dtype=float)
    k = H.shape[0]
    if H.shape != (k, k):
        raise DomainError("Hessian must be square")
    if k == 0:
        return StandardErrors(np.zeros(0), np.zeros((0, 0)), "ok")
    if not np.allclose(H, H.T, rtol=1e-8, atol=1e-10 * max(1.0, np.abs(H).max())):
        raise DomainError("Hessian is not symmetric")
    info = -0.5 * (H + H.T)
    eig, vec = np.linalg.eigh(info)
    scale = np.abs(eig).max()
    if scale == 0 or np.abs(eig).min() <= rcond * scale:
        msg = f"singular information matrix (smallest |eigenvalue| {np.abs(eig).min():.3g})"
        warnings.warn(EstimationWarning(msg), stacklevel=2)
        return StandardErrors(np.full(k, np.nan), None, "singular", msg)
    cov = (vec / eig) @ vec.T
    status, msg = "ok", ""
    if eig.min() < 0:
        status = "indefinite"
        msg = f"information matrix is indefinite ({int((eig < 0).sum())} negative eigenvalues); pseudo-inverse used"
        warnings.warn(EstimationWarning(msg), stacklevel=2)
    var = np.diag(cov)
    se = np.where(var > 0, np.sqrt(np.where(var > 0, var, 1.0)), np.nan)
    return StandardErrors(se, cov, status, msg)


def numerical_hessian(
    grad, x: np.ndarray, step: float = 1e-5, lower: np.ndarray | None = None
) -> np.ndarray:
    """Differences of an analytic gradient, symmetrised.

    Central differences, except forward ones for coordinates within one step
    of their ``lower`` bound.
    """
    x = np.asarray(x, dtype=float)
    k = len(x)
    lower = np.full(k, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    H = np.empty((k, k))
    g0 = None
    for i in range(k):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros(k)
        e[i] = h
        if x[i] - h < lower[i]:
            if g0 is None:
                g0 = grad(x)
            H[:, i] = (grad(x + e) - g0) / h
        else:
            H[:, i] = (grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def _never_chosen(model: CnlModel, data: Prepared) -> list[str]:
    counts = np.bincount(data.chosen, minlength=len(model.choiceset))
    free_ascs = {t.combination for t in model.spec.free_terms if t.kind == "asc"}
    return [c.label for j, c in enumerate(model.choiceset) if counts[j] == 0 and c in free_ascs]


def _starting_point(model: CnlModel, settings: EstimationSettings) -> np.ndarray:
    x = model.initial_theta().values.copy()
    nb = model.spec.n_free
    unknown = set(settings.initial_values) - set(model.parameter_names)
    if unknown:
        raise DomainError(f"initial values for unknown parameters: {sorted(unknown)}")
    for i, name in enumerate(model.parameter_names):
        if name in settings.initial_values:
            v = float(settings.initial_values[name])
            x[i] = float(free_from_scale(v)) if i >= nb else v
    return x


def _bhhh_inverse(model: CnlModel, x: np.ndarray, data: Prepared) -> np.ndarray | None:
    """Inverse outer-product-of-scores matrix, scaled for the mean objective."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = scores(model, x, data)
    if not np.all(np.isfinite(s)):
        return None
    B = s.T @ s / data.n
    B += 1e-8 * np.trace(B) / len(B) * np.eye(len(B))
    try:
        inv = np.linalg.inv(B)
    except np.linalg.LinAlgError:
        return None
    inv = 0.5 * (inv + inv.T)
    return inv if np.all(np.linalg.eigvalsh(inv) > 0) else None


def estimate(
    model: CnlModel,
    dataset: Dataset,
    settings: EstimationSettings | None = None,
) -> EstimationResult:
    """Fit the free parameters by maximum likelihood.

    BFGS, started from the inverse BHHH matrix, runs on the mean negative
    log-likelihood in the transformed space (``mu = 1 + softplus(eta)``).  If
    it stops before the gradient criterion is met, Newton steps on a
    finite-difference Hessian finish the job.  Convergence means the
    max-norm of the log-likelihood gradient is at most ``settings.tolerance``.

    Standard errors come from the finite-difference Hessian of the
    log-likelihood in natural coordinates, which stays defined when a nest
    scale sits on its bound of 1.
    """
    settings = settings or EstimationSettings()
    data = prepare(model, dataset)
    names = model.parameter_names
    L0 = null_log_likelihood(dataset, model.choiceset)
    diagnostics: list[str] = []

    x0 = _starting_point(model, settings)
    if model.n_free == 0:
        ll = log_likelihood(model, x0, data)
        return EstimationResult(
            names, np.zeros(0), np.zeros(0), np.zeros((0, 0)), ParameterVector(names, x0),
            L0, ll, ll, 0, True, "no free parameters", data.n, 0.0,
        )

    for label in _never_chosen(model, data):
        msg = f"alternative {label} is never chosen; its free constant may diverge"
        warnings.warn(EstimationWarning(msg), stacklevel=2)
        diagnostics.append(msg)

    n = data.n
    cache: dict[bytes, tuple[float, np.ndarray]] = {}

    def evaluate(x: np.ndarray) -> tuple[float, np.ndarray]:
        key = x.tobytes()
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cache[key] = loglik_and_gradient(model, x, data)
        return cache[key]

    def objective(x):
        ll, g = evaluate(x)
        if not math.isfinite(ll):
            return math.inf, np.zeros_like(x)
        return -ll / n, -g / n

    ll_init, _ = evaluate(x0)
    options = {"gtol": settings.tolerance / n, "norm": np.inf, "maxiter": settings.max_iterations}
    h0 = _bhhh_inverse(model, x0, data)
    if h0 is not None:
        options["hess_inv0"] = h0
    res = minimize(objective, x0, jac=True, method="BFGS", options=options)
    x = res.x
    iterations = int(res.nit)
    ll, g = evaluate(x)
    gnorm = float(np.max(np.abs(g)))
    log.debug("BFGS stopped after %d iterations: %s (|g| = %.3g)", iterations, res.message, gnorm)

    def grad(v):
        return evaluate(v)[1]

    while gnorm > settings.tolerance and iterations < settings.max_iterations:
        H = numerical_hessian(grad, x, settings.hessian_step)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or g @ step <= 0:
            break
        # near the optimum the change in ll drops below its rounding noise,
        # so a step that stays within that noise and shrinks |g| is accepted
        noise = 64 * np.finfo(float).eps * max(1.0, abs(ll))
        t = 1.0
        while t > 1e-6:
            ll_new, g_new = evaluate(x + t * step)
            if math.isfinite(ll_new) and (
                ll_new >= ll or (ll_new >= ll - noise and np.max(np.abs(g_new)) < gnorm)
            ):
                break
            t *= 0.5
        else:
            break
        x, ll, g = x + t * step, ll_new, g_new
        iterations += 1
        new_norm = float(np.max(np.abs(g)))
        stalled = new_norm >= gnorm
        gnorm = new_norm
        if stalled:
            break

    converged = gnorm <= settings.tolerance
    message = "converged" if converged else f"gradient max-norm {gnorm:.3g} above tolerance ({res.message})"
    if not converged:
        diagnostics.append(message)

    natural = np.array(list(model.natural(x).values()))
    nb = model.spec.n_free
    lower = np.full(len(x), -np.inf)
    lower[nb:] = 1.0

    def natural_grad(v):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return natural_gradient(model, v, data)

    H_nat = numerical_hessian(natural_grad, natural, settings.hessian_step, lower)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        se = standard_errors(H_nat)
    for w in caught:
        diagnostics.append(str(w.message))

    return EstimationResult(
        names=names,
        estimates=natural,
        std_errors=se.values,
        covariance=se.covariance,
        theta=ParameterVector(names, x),
        null_loglik=L0,
        final_loglik=ll,
        initial_loglik=ll_init,
        iterations=iterations,
        converged=converged,
        message=message,
        n_obs=n,
        gradient_norm=gnorm,
        se_status=se.status,
        diagnostics=tuple(diagnostics),
    )


def test_scale_parameters(result: EstimationResult, nests: Sequence[str] | None = None) -> list[ScaleTest]:
    """t-tests of each estimated nest scale against 1 (the logit collapse)."""
    out = []
    for i, name in enumerate(result.names):
        if not name.startswith("mu_"):
            continue
        code = name[3:]
        if nests is not None and code not in nests:
            continue
        mu, se = float(result.estimates[i]), float(result.std_errors[i])
        if not math.isfinite(se) or se <= 0:
            out.append(ScaleTest(code, mu, None, None, None))
            continue
        t = (mu - 1.0) / se
        out.append(ScaleTest(code, mu, se, t, abs(t) > 1.96))
    return out


test_scale_parameters.__test__ = False  # keep pytest from collecting it
