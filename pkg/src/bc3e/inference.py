"""Variational E-step: per-instance phi/gamma coordinate ascent and the ELBO."""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import AllNegativeInfinity, NonConvergenceWarning, NumericalError, ValidationError
from .exact import exact_total
from .model import LabelTable, ModelParams, VariationalState, class_counts
from .special import digamma, log_gamma, normalize_rows, row_max, row_sum


@dataclass(frozen=True)
class EStepConfig:
    inner_tol: float = 1e-8
    max_inner_iters: int = 50
    elbo_slack: float = 1e-8

    def __post_init__(self):
        if self.inner_tol < 0:
            raise ValidationError("inner_tol must be nonnegative")
        if self.max_inner_iters < 1:
            raise ValidationError("max_inner_iters must be at least 1")
        if self.elbo_slack < 0:
            raise ValidationError("elbo_slack must be nonnegative")


@dataclass
class ElboBreakdown:
    total: float
    expected_log_joint: float
    entropy: float
    per_term: Dict[str, float] = field(default_factory=dict)


class InstanceResult(NamedTuple):
    gamma: np.ndarray
    phi: np.ndarray
    inner_iterations: int
    converged: bool
    elbo_trace: Optional[List[float]] = None


ELBO_TERMS = ("theta_prior", "classifier", "z", "cluster_emission", "entropy_theta", "entropy_z")


def _log_beta(beta):
    return [np.log(np.ascontiguousarray(b)) for b in beta]


def _phi_batch(gamma, log_beta, cluster_labels):
    """n x k gamma -> n x r2 x k phi."""
    n, k = gamma.shape
    r2 = len(log_beta)
    phi = np.empty((n, r2, k))
    if r2 == 0:
        return phi
    psi_g = digamma(gamma)
    for m, lb in enumerate(log_beta):
        # lb[:, j] for each row's observed cluster j, laid out n x k
        emit = np.ascontiguousarray(lb[:, cluster_labels[:, m]].T)
        phi[:, m, :] = normalize_rows(psi_g + emit)
    return phi


def _gamma_batch(alpha, counts, phi):
    g = alpha[None, :] + counts
    for m in range(phi.shape[1]):
        g = g + phi[:, m, :]
    return g


def update_phi(gamma_n, beta, cluster_labels_n):
    """Optimal q(z_nm) for every clustering m of one instance, r2 x k."""
    gamma_n = np.asarray(gamma_n, dtype=np.float64)
    labels = np.asarray(cluster_labels_n, dtype=np.int64).reshape(1, -1)
    return _phi_batch(gamma_n[None, :], _log_beta(beta), labels)[0]


def update_gamma(alpha, class_labels_n, phi_n):
    """gamma_n = alpha + classifier vote counts + sum over clusterings of phi_nm."""
    alpha = np.asarray(alpha, dtype=np.float64)
    labels = np.asarray(class_labels_n, dtype=np.int64).reshape(1, -1)
    phi_n = np.asarray(phi_n, dtype=np.float64).reshape(1, -1, alpha.shape[0])
    return _gamma_batch(alpha, class_counts(labels, alpha.shape[0]), phi_n)[0]


def _pack_log_beta(log_beta, k):
    width = max([lb.shape[1] for lb in log_beta], default=1)
    packed = np.zeros((len(log_beta), k, width))
    for m, lb in enumerate(log_beta):
        packed[m, :, :lb.shape[1]] = lb
    return packed


def elbo_terms(params: ModelParams, gamma, phi, class_labels, cluster_labels):
    """Per-instance ELBO contributions, one length-n array per named term."""
    k = params.n_classes
    gamma = np.asarray(gamma, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64).reshape(gamma.shape[0], -1, k)
    cluster_labels = np.asarray(cluster_labels, dtype=np.int64).reshape(gamma.shape[0], -1)
    terms = kernels.elbo_rows(params.alpha, _pack_log_beta(_log_beta(params.beta), k),
                              class_counts(class_labels, k), cluster_labels, gamma, phi)
    return {name: terms[:, t].copy() for t, name in enumerate(ELBO_TERMS)}


def _elbo_terms_reference(params: ModelParams, gamma, phi, class_labels, cluster_labels):
    """Vectorized numpy version of :func:`elbo_terms`; used as a test oracle."""
    alpha = params.alpha
    k = alpha.shape[0]
    gamma = np.asarray(gamma, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n = gamma.shape[0]
    e_log_theta = digamma(gamma) - digamma(row_sum(gamma))[:, None]

    lg_alpha = float(log_gamma(float(row_sum(alpha[None, :])[0]))) - float(row_sum(log_gamma(alpha)[None, :])[0])
    terms = {}
    terms["theta_prior"] = lg_alpha + row_sum((alpha - 1.0)[None, :] * e_log_theta)
    terms["classifier"] = row_sum(class_counts(class_labels, k) * e_log_theta)

    z_term = np.zeros(n)
    emission = np.zeros(n)
    ent_z = np.zeros(n)
    for m, lb in enumerate(_log_beta(params.beta)):
        ph = phi[:, m, :]
        emit = np.ascontiguousarray(lb[:, cluster_labels[:, m]].T)
        z_term = z_term + row_sum(ph * e_log_theta)
        emission = emission + row_sum(ph * emit)
        safe = np.where(ph > 0, ph, 1.0)
        ent_z = ent_z - row_sum(np.where(ph > 0, ph * np.log(safe), 0.0))
    terms["z"] = z_term
    terms["cluster_emission"] = emission

    lg_gamma = log_gamma(row_sum(gamma)) - row_sum(log_gamma(gamma))
    terms["entropy_theta"] = -(lg_gamma + row_sum((gamma - 1.0) * e_log_theta))
    terms["entropy_z"] = ent_z
    return terms


def instance_elbo(params, gamma, phi, class_labels, cluster_labels):
    """Total per-instance ELBO, length n (terms added in a fixed order)."""
    terms = elbo_terms(params, gamma, phi, class_labels, cluster_labels)
    total = np.zeros(np.asarray(gamma).shape[0])
    for name in ELBO_TERMS:
        total = total + terms[name]
    return total


def _initial_elbo(params, class_labels, cluster_labels):
    k = params.n_classes
    n, r2 = cluster_labels.shape
    gamma = params.alpha[None, :] + class_counts(class_labels, k) + (r2 / k)
    return instance_elbo(params, gamma, np.full((n, r2, k), 1.0 / k), class_labels, cluster_labels)


def _e_step_rows(params, log_beta, class_labels, cluster_labels, cfg, track_elbo):
    alpha = params.alpha
    k = alpha.shape[0]
    packed = _pack_log_beta(log_beta, k)
    counts = class_counts(class_labels, k)
    gamma, phi, iters, converged, gh, ph, bad = kernels.estep_rows(
        alpha, packed, counts, cluster_labels, cfg.inner_tol, cfg.max_inner_iters, track_elbo)
    if bad:
        raise AllNegativeInfinity(f"row {bad}: every class has zero probability under beta")
    history = None
    if track_elbo:
        n = class_labels.shape[0]
        history = np.full((cfg.max_inner_iters + 1, n), np.nan)
        history[0] = _initial_elbo(params, class_labels, cluster_labels)
        for it in range(1, int(iters.max(initial=0)) + 1):
            rows = np.nonzero(iters >= it)[0]
            history[it, rows] = instance_elbo(params, gh[it - 1, rows], ph[it - 1, rows],
                                                  class_labels[rows], cluster_labels[rows])
    return gamma, phi, iters, converged, history


def _e_step_rows_reference(params, log_beta, class_labels, cluster_labels, cfg, track_elbo):
    """Pure numpy version of :func:`_e_step_rows` (vectorized over rows); used as a test oracle."""
    alpha = params.alpha
    n = class_labels.shape[0]
    k = alpha.shape[0]
    r2 = cluster_labels.shape[1]
    counts = class_counts(class_labels, k)
    gamma = alpha[None, :] + counts + (r2 / k)
    phi = np.full((n, r2, k), 1.0 / k)
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    history = None
    if track_elbo:
        history = np.full((cfg.max_inner_iters + 1, n), np.nan)
        history[0] = instance_elbo(params, gamma, phi, class_labels, cluster_labels)

    active = np.arange(n)
    for it in range(1, cfg.max_inner_iters + 1):
        if active.size == 0:
            break
        g_old = gamma[active]
        ph = _phi_batch(g_old, log_beta, cluster_labels[active])
        g_new = _gamma_batch(alpha, counts[active], ph)
        delta = row_max(np.abs(g_new - g_old))
        phi[active] = ph
        gamma[active] = g_new
        iters[active] = it
        if track_elbo:
            history[it, active] = instance_elbo(params, g_new, ph, class_labels[active], cluster_labels[active])
        done = delta < cfg.inner_tol
        converged[active[done]] = True
        active = active[~done]
    return gamma, phi, iters, converged, history


def e_step(params: ModelParams, table: LabelTable, cfg: EStepConfig = EStepConfig(),
           workers: int = 1, track_elbo: bool = False):
    """Run the E-step on every row of ``table``.

    Rows are processed independently, so splitting them across ``workers``
    threads returns bit-identical results. With ``track_elbo`` the second
    return value is a ((max_inner_iters + 1) x N) array of per-instance ELBO
    values: row 0 is the initial state, row t the state after inner iteration
    t (NaN once an instance has converged). Otherwise it is None.
    """
    log_beta = _log_beta(params.beta)
    n = table.n_instances
    chunks = [np.arange(n)]
    if workers > 1 and n > 1:
        chunks = [c for c in np.array_split(np.arange(n), min(workers, n)) if c.size]

    def run(idx):
        return _e_step_rows(params, log_beta, table.class_labels[idx], table.cluster_labels[idx], cfg, track_elbo)

    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    gamma = np.concatenate([p[0] for p in parts])
    phi = np.concatenate([p[1] for p in parts])
    iters = np.concatenate([p[2] for p in parts])
    conv = np.concatenate([p[3] for p in parts])
    history = np.concatenate([p[4] for p in parts], axis=1) if track_elbo else None
    return VariationalState(gamma, phi, iters, conv), history


def e_step_instance(n: int, params: ModelParams, table: LabelTable, cfg: EStepConfig = EStepConfig(),
                    track_elbo: bool = False) -> InstanceResult:
    """E-step for a single instance; reads only row ``n`` of the table."""
    gamma, phi, iters, conv, hist = _e_step_rows(
        params, _log_beta(params.beta), table.class_labels[n:n + 1], table.cluster_labels[n:n + 1], cfg, track_elbo)
    trace = None
    if track_elbo:
        trace = [float(v) for v in hist[:, 0] if not math.isnan(v)]
    if not conv[0]:
        warnings.warn(f"instance {n}: inner iterations stopped at {cfg.max_inner_iters} without converging",
                      NonConvergenceWarning, stacklevel=2)
    return InstanceResult(gamma[0], phi[0], int(iters[0]), bool(conv[0]), trace)


def compute_elbo(params: ModelParams, state: VariationalState, table: LabelTable) -> ElboBreakdown:
    terms = elbo_terms(params, state.gamma, state.phi, table.class_labels, table.cluster_labels)
    per_term = {name: exact_total(terms[name]) for name in ELBO_TERMS}
    total_rows = np.zeros(state.n_instances)
    for name in ELBO_TERMS:
        total_rows = total_rows + terms[name]
    total = exact_total(total_rows)
    joint = math.fsum(per_term[t] for t in ELBO_TERMS[:4])
    entropy = math.fsum(per_term[t] for t in ELBO_TERMS[4:])
    if not all(math.isfinite(v) for v in (total, joint, entropy)):
        raise NumericalError("ELBO is not finite; check smoothing of beta and positivity of gamma")
    return ElboBreakdown(total, joint, entropy, per_term)
