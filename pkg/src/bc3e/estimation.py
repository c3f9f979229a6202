"""M-step (beta closed form, Newton-Raphson for alpha) and the outer VEM loop."""

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import DomainError, NewtonNonConvergence, NonConvergenceWarning, NumericalError, ValidationError
from .exact import exact_total
from .inference import EStepConfig, e_step, instance_elbo
from .model import LabelTable, ModelParams, ProblemShape, VariationalState, predicted_class, validate_table
from .special import digamma, log_gamma, row_sum, trigamma

INIT_PERTURBATION = 0.01


@dataclass(frozen=True)
class FitConfig:
    outer_tol: float = 1e-6
    max_outer_iters: int = 100
    eps_beta: float = 1e-10
    alpha_floor: float = 1e-10
    newton_max_iters: int = 50
    newton_tol: float = 1e-10
    rng_seed: int = 0
    freeze_alpha: bool = False
    inner_tol: float = 1e-8
    max_inner_iters: int = 50

    def __post_init__(self):
        for name in ("outer_tol", "newton_tol", "inner_tol"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.eps_beta <= 0:
            raise ValidationError("eps_beta must be positive")
        if self.alpha_floor <= 0:
            raise ValidationError("alpha_floor must be positive")
        for name in ("max_outer_iters", "newton_max_iters", "max_inner_iters"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")

    @property
    def estep(self) -> EStepConfig:
        return EStepConfig(inner_tol=self.inner_tol, max_inner_iters=self.max_inner_iters)


@dataclass
class SufficientStats:
    """Everything the M-step needs, summed over instances."""

    beta_numerators: List[np.ndarray]
    gamma_stats: np.ndarray
    count: int
    elbo: float


@dataclass
class FitReport:
    elbo_trace: List[float]
    outer_iterations: int
    converged: bool
    posteriors: np.ndarray
    predicted_class: np.ndarray
    params: ModelParams
    alpha_trace: List[np.ndarray] = field(default_factory=list)
    initial_params: Optional[ModelParams] = None
    newton_unconverged: int = 0
    estep_unconverged: int = 0
    inner_max_decrease: Optional[float] = None


class NewtonResult(NamedTuple):
    alpha: np.ndarray
    iterations: int
    converged: bool


def init_params(shape: ProblemShape, seed: int) -> ModelParams:
    """alpha = 1, beta rows uniform plus a small seeded perturbation."""
    rng = np.random.default_rng(seed)
    k = shape.n_classes
    beta = []
    for km in shape.clusters_per_clustering:
        b = 1.0 / km + rng.uniform(0.0, INIT_PERTURBATION, size=(k, km))
        beta.append(b / row_sum(b)[:, None])
    return ModelParams(np.ones(k), beta)


def gamma_stat_terms(gamma):
    """Per-instance E_q[log theta_ni] = psi(gamma_ni) - psi(sum_i gamma_ni), n x k."""
    return kernels.e_log_theta(gamma)


def beta_numerator_terms(phi, cluster_labels, m, km):
    """Yield (j, n_j x k block of phi) for clustering m: the terms of S_m[:, j]."""
    labels = cluster_labels[:, m]
    for j in range(km):
        yield j, phi[labels == j, m, :]


def sufficient_stats(params: ModelParams, state: VariationalState, table: LabelTable) -> SufficientStats:
    k = params.n_classes
    numerators = []
    for m, b in enumerate(params.beta):
        s = np.zeros((k, b.shape[1]))
        for j, block in beta_numerator_terms(state.phi, table.cluster_labels, m, b.shape[1]):
            for i in range(k):
                s[i, j] = exact_total(block[:, i])
        numerators.append(s)
    terms = gamma_stat_terms(state.gamma)
    gstats = np.array([exact_total(terms[:, i]) for i in range(k)])
    elbo = exact_total(instance_elbo(params, state.gamma, state.phi, table.class_labels, table.cluster_labels))
    if not math.isfinite(elbo):
        raise NumericalError("ELBO is not finite")
    return SufficientStats(numerators, gstats, table.n_instances, elbo)


def beta_from_numerators(numerators, eps_beta):
    beta = []
    for s in numerators:
        b = np.asarray(s, dtype=np.float64) + eps_beta
        beta.append(b / row_sum(b)[:, None])
    return beta


def m_step_beta(state: VariationalState, table: LabelTable, eps_beta: float, clusters_per_clustering):
    """beta_mij proportional to eps_beta + sum_n phi_nmi [cluster of n in m is j]."""
    k = state.gamma.shape[1]
    numerators = []
    for m, km in enumerate(clusters_per_clustering):
        s = np.zeros((k, km))
        for j, block in beta_numerator_terms(state.phi, table.cluster_labels, m, km):
            for i in range(k):
                s[i, j] = exact_total(block[:, i])
        numerators.append(s)
    return beta_from_numerators(numerators, eps_beta)


def _check_alpha(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(alpha > 0):
        raise DomainError("alpha must be strictly positive")
    return alpha


def alpha_objective(alpha, gamma_stats, n) -> float:
    """Expected Dirichlet log-prior summed over n instances, as a function of alpha."""
    alpha = _check_alpha(alpha)
    gamma_stats = np.asarray(gamma_stats, dtype=np.float64)
    total = float(row_sum(alpha[None, :])[0])
    lg = log_gamma(total) - float(row_sum(log_gamma(alpha)[None, :])[0])
    return n * lg + float(row_sum(((alpha - 1.0) * gamma_stats)[None, :])[0])


def alpha_gradient(alpha, gamma_stats, n) -> np.ndarray:
    alpha = _check_alpha(alpha)
    total = float(row_sum(alpha[None, :])[0])
    return n * (digamma(total) - digamma(alpha)) + np.asarray(gamma_stats, dtype=np.float64)


def _newton_direction(alpha, grad, n):
    # Hessian = diag(q) + z 11^T; solve H x = grad in O(k).
    q = -n * trigamma(alpha)
    z = n * trigamma(float(row_sum(alpha[None, :])[0]))
    b = float(row_sum((grad / q)[None, :])[0]) / (1.0 / z + float(row_sum((1.0 / q)[None, :])[0]))
    return (grad - b) / q


def inverse_digamma(y, iters=6):
    """x > 0 with psi(x) = y, by Newton's method from a closed-form start."""
    y = np.asarray(y, dtype=np.float64)
    x = np.where(y >= -2.22, np.exp(np.minimum(y, 700.0)) + 0.5, -1.0 / (y - digamma(1.0)))
    for _ in range(iters):
        x = np.maximum(x - (digamma(x) - y) / trigamma(x), x / 16.0)
    return x


def _fixed_point_candidate(alpha, gamma_stats, n, floor):
    # psi(alpha_i) = psi(sum alpha) + gamma_stats_i / n never lowers the objective;
    # it rescues the Newton step when the Hessian is nearly singular (a tiny
    # component next to moderate ones).
    total = float(row_sum(alpha[None, :])[0])
    target = digamma(total) + np.asarray(gamma_stats, dtype=np.float64) / n
    if not np.all(np.isfinite(target)):
        return None
    cand = np.maximum(inverse_digamma(target), floor)
    return cand if np.all(np.isfinite(cand)) else None


def m_step_alpha(alpha_init, gamma_stats, n, cfg: FitConfig = FitConfig(),
                 callback: Optional[Callable[[np.ndarray], None]] = None) -> NewtonResult:
    """Maximize :func:`alpha_objective` by damped Newton steps with a positivity floor.

    The step is halved until every component stays at or above
    ``cfg.alpha_floor`` and the objective does not decrease. Each iteration
    also evaluates the monotone fixed-point update and keeps it if it scores
    higher, which covers the ill-conditioned region near the floor.
    ``callback`` is invoked with each accepted iterate.
    """
    floor = cfg.alpha_floor
    alpha = np.maximum(_check_alpha(alpha_init), floor)
    f = alpha_objective(alpha, gamma_stats, n)
    for it in range(1, cfg.newton_max_iters + 1):
        grad = alpha_gradient(alpha, gamma_stats, n)
        if np.max(np.abs(grad)) < cfg.newton_tol:
            return NewtonResult(alpha, it - 1, True)
        step = _newton_direction(alpha, grad, n)
        t = 1.0
        accepted = None
        for _ in range(64):
            cand = alpha - t * step
            if np.all(cand >= floor):
                fc = alpha_objective(cand, gamma_stats, n)
                if fc >= f:
                    accepted = cand
                    break
            t *= 0.5
        fixed = _fixed_point_candidate(alpha, gamma_stats, n, floor)
        if fixed is not None:
            ff = alpha_objective(fixed, gamma_stats, n)
            if ff >= f and (accepted is None or ff > fc):
                accepted, fc = fixed, ff
        if accepted is None:
            # no ascent possible at double precision: treat as stationary
            return NewtonResult(alpha, it, True)
        moved = np.max(np.abs(accepted - alpha)) / np.max(alpha)
        alpha, f = accepted, fc
        if callback is not None:
            callback(alpha)
        if moved < 1e-15:
            return NewtonResult(alpha, it, True)
    grad = alpha_gradient(alpha, gamma_stats, n)
    ok = bool(np.max(np.abs(grad)) < cfg.newton_tol)
    if not ok:
        warnings.warn(f"Newton stopped after {cfg.newton_max_iters} iterations with |grad| = "
                      f"{np.max(np.abs(grad)):.3g}; keeping the best iterate", NewtonNonConvergence, stacklevel=2)
    return NewtonResult(alpha, cfg.newton_max_iters, ok)


def m_step(stats: SufficientStats, params: ModelParams, cfg: FitConfig):
    """New parameters from aggregate statistics; returns (params, newton_converged)."""
    beta = beta_from_numerators(stats.beta_numerators, cfg.eps_beta)
    if cfg.freeze_alpha:
        return ModelParams(params.alpha.copy(), beta), True
    res = m_step_alpha(params.alpha, stats.gamma_stats, stats.count, cfg)
    return ModelParams(res.alpha, beta), res.converged


def elbo_converged(trace, tol) -> bool:
    if len(trace) < 2:
        return False
    prev, cur = trace[-2], trace[-1]
    return abs(cur - prev) <= tol * abs(prev)


def _max_decrease(history) -> float:
    drops = history[:-1] - history[1:]
    drops = drops[~np.isnan(drops)]
    return float(drops.max()) if drops.size else 0.0


def fit(table: LabelTable, shape: ProblemShape, cfg: FitConfig = FitConfig(), workers: int = 1,
        track_inner: bool = False) -> FitReport:
    """Centralized variational EM.

    With ``track_inner`` every E-step records per-instance ELBO values after
    each inner iteration and the report carries the largest decrease seen.
    """
    validate_table(table, shape)
    params = init_params(shape, cfg.rng_seed)
    initial = params.copy()
    trace, alpha_trace = [], []
    newton_bad = 0
    converged = False
    state = None
    worst = 0.0 if track_inner else None
    for t in range(1, cfg.max_outer_iters + 1):
        state, history = e_step(params, table, cfg.estep, workers=workers, track_elbo=track_inner)
        if track_inner:
            worst = max(worst, _max_decrease(history))
        stats = sufficient_stats(params, state, table)
        trace.append(stats.elbo)
        alpha_trace.append(params.alpha.copy())
        if elbo_converged(trace, cfg.outer_tol):
            converged = True
            break
        if t == cfg.max_outer_iters:
            break
        params, ok = m_step(stats, params, cfg)
        newton_bad += not ok
    post = state.posteriors()
    unconverged = int(np.sum(~state.converged))
    if unconverged:
        warnings.warn(f"{unconverged} instance(s) hit max_inner_iters in the final E-step", NonConvergenceWarning,
                      stacklevel=2)
    return FitReport(
        elbo_trace=trace,
        outer_iterations=len(trace),
        converged=converged,
        posteriors=post,
        predicted_class=predicted_class(post),
        params=params,
        alpha_trace=alpha_trace,
        initial_params=initial,
        newton_unconverged=newton_bad,
        estep_unconverged=unconverged,
        inner_max_decrease=worst,
    )
