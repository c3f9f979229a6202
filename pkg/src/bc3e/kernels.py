"""Compiled per-row loops: the E-step iteration and the ELBO terms.

Each row is processed by the same scalar code from start to finish, so a
row's result never depends on which other rows share the call. This is what
lets a site holding a single instance reproduce the centralized bits.
The numpy implementation in :mod:`bc3e.inference` is kept as a reference.
"""

import math

import numpy as np
from numba import njit

from .special import _DIGAMMA_SERIES, _DIGAMMA_SHIFT, _HALF_LOG_2PI, _LGAMMA_SERIES, _LGAMMA_SHIFT

_DG = np.array(_DIGAMMA_SERIES)
_LG = np.array(_LGAMMA_SERIES)
N_TERMS = 6


@njit(cache=True)
def _reciprocal(z):
    hi = 1.0 / z
    p = hi * z
    c = 134217729.0 * hi
    ah = c - (c - hi)
    al = hi - ah
    c = 134217729.0 * z
    bh = c - (c - z)
    bl = z - bh
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return hi, ((1.0 - p) - err) / z


@njit(cache=True)
def digamma(x, series, shift):
    his = np.zeros(8)
    los = np.zeros(8)
    j = 0
    while x + j < shift:
        his[j], los[j] = _reciprocal(x + j)
        j += 1
    z = x + j
    inv2 = 1.0 / (z * z)
    acc = series[series.shape[0] - 1]
    for q in range(series.shape[0] - 2, -1, -1):
        acc = acc * inv2 + series[q]
    res = math.log(z) - 0.5 / z - inv2 * acc
    for q in range(j):
        res -= los[q]
    for q in range(j - 1, -1, -1):
        res -= his[q]
    return res


@njit(cache=True)
def log_gamma(x, series, shift):
    if x == 1.0 or x == 2.0:
        return 0.0
    prod = 1.0
    j = 0
    while x + j < shift:
        prod *= x + j
        j += 1
    z = x + j
    inv = 1.0 / z
    inv2 = inv * inv
    acc = series[series.shape[0] - 1]
    for q in range(series.shape[0] - 2, -1, -1):
        acc = acc * inv2 + series[q]
    return (z - 0.5) * math.log(z) - z + _HALF_LOG_2PI + inv * acc - math.log(prod)


@njit(cache=True)
def _e_log_theta(gamma, out, dg, dshift):
    n, k = gamma.shape
    for row in range(n):
        total = gamma[row, 0]
        for i in range(1, k):
            total += gamma[row, i]
        psi_total = digamma(total, dg, dshift)
        for i in range(k):
            out[row, i] = digamma(gamma[row, i], dg, dshift) - psi_total


@njit(cache=True)
def _elbo_rows(alpha, log_beta, counts, clusters, gamma, phi, terms, dg, dshift, lg, lshift):
    n, k = counts.shape
    r2 = clusters.shape[1]
    a_total = alpha[0]
    for i in range(1, k):
        a_total += alpha[i]
    lg_alpha = log_gamma(alpha[0], lg, lshift)
    for i in range(1, k):
        lg_alpha += log_gamma(alpha[i], lg, lshift)
    lg_alpha = log_gamma(a_total, lg, lshift) - lg_alpha
    elt = np.empty(k)
    for row in range(n):
        g_total = gamma[row, 0]
        for i in range(1, k):
            g_total += gamma[row, i]
        psi_total = digamma(g_total, dg, dshift)
        for i in range(k):
            elt[i] = digamma(gamma[row, i], dg, dshift) - psi_total
        prior = 0.0
        clf = 0.0
        ent_theta = 0.0
        lgg = 0.0
        for i in range(k):
            prior += (alpha[i] - 1.0) * elt[i]
            clf += counts[row, i] * elt[i]
            ent_theta += (gamma[row, i] - 1.0) * elt[i]
            lgg += log_gamma(gamma[row, i], lg, lshift)
        z_term = 0.0
        emission = 0.0
        ent_z = 0.0
        for m in range(r2):
            j = clusters[row, m]
            zs = 0.0
            es = 0.0
            hs = 0.0
            for i in range(k):
                p = phi[row, m, i]
                zs += p * elt[i]
                es += p * log_beta[m, i, j]
                if p > 0.0:
                    hs += p * math.log(p)
            z_term += zs
            emission += es
            ent_z -= hs
        terms[row, 0] = lg_alpha + prior
        terms[row, 1] = clf
        terms[row, 2] = z_term
        terms[row, 3] = emission
        terms[row, 4] = -((log_gamma(g_total, lg, lshift) - lgg) + ent_theta)
        terms[row, 5] = ent_z


@njit(cache=True)
def _estep(alpha, log_beta, counts, clusters, inner_tol, max_iters, gamma, phi, iters, converged,
           gamma_hist, phi_hist, track, series, shift):
    n, k = counts.shape
    r2 = clusters.shape[1]
    psi = np.empty(k)
    lw = np.empty(k)
    g_new = np.empty(k)
    for row in range(n):
        for i in range(k):
            gamma[row, i] = alpha[i] + counts[row, i] + r2 / k
            for m in range(r2):
                phi[row, m, i] = 1.0 / k
        for it in range(1, max_iters + 1):
            for i in range(k):
                psi[i] = digamma(gamma[row, i], series, shift)
            for m in range(r2):
                j = clusters[row, m]
                top = -np.inf
                for i in range(k):
                    lw[i] = psi[i] + log_beta[m, i, j]
                    if lw[i] > top:
                        top = lw[i]
                if not top > -np.inf or not math.isfinite(top):
                    return row + 1
                total = 0.0
                for i in range(k):
                    lw[i] = math.exp(lw[i] - top)
                    total += lw[i]
                for i in range(k):
                    phi[row, m, i] = lw[i] / total
            delta = 0.0
            for i in range(k):
                g = alpha[i] + counts[row, i]
                for m in range(r2):
                    g += phi[row, m, i]
                g_new[i] = g
                d = abs(g - gamma[row, i])
                if d > delta:
                    delta = d
            for i in range(k):
                gamma[row, i] = g_new[i]
            iters[row] = it
            if track:
                for i in range(k):
                    gamma_hist[it - 1, row, i] = gamma[row, i]
                    for m in range(r2):
                        phi_hist[it - 1, row, m, i] = phi[row, m, i]
            if delta < inner_tol:
                converged[row] = True
                break
    return 0


def estep_rows(alpha, log_beta, counts, clusters, inner_tol, max_iters, track=False):
    """Iterate the phi/gamma updates for each row; returns gamma, phi, iters, converged[, histories].

    ``log_beta`` is an r2 x k x max_m(k^(m)) array (padding is never read).
    Returns a nonzero ``bad_row`` (1-based) if some row had no finite log weight.
    """
    n, k = counts.shape
    r2 = clusters.shape[1]
    gamma = np.empty((n, k))
    phi = np.empty((n, r2, k))
    iters = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=np.bool_)
    if track:
        gh = np.full((max_iters, n, k), np.nan)
        ph = np.full((max_iters, n, r2, k), np.nan)
    else:
        gh = np.empty((0, 0, k))
        ph = np.empty((0, 0, r2, k))
    bad = _estep(np.ascontiguousarray(alpha, dtype=np.float64), np.ascontiguousarray(log_beta, dtype=np.float64),
                 np.ascontiguousarray(counts, dtype=np.float64), np.ascontiguousarray(clusters, dtype=np.int64),
                 float(inner_tol), int(max_iters), gamma, phi, iters, converged, gh, ph, bool(track), _DG,
                 float(_DIGAMMA_SHIFT))
    return gamma, phi, iters, converged, gh, ph, bad


def e_log_theta(gamma):
    """E_q[log theta] = psi(gamma_ni) - psi(sum_i gamma_ni), row by row."""
    gamma = np.ascontiguousarray(gamma, dtype=np.float64)
    out = np.empty(gamma.shape)
    _e_log_theta(gamma, out, _DG, float(_DIGAMMA_SHIFT))
    return out


def elbo_rows(alpha, log_beta, counts, clusters, gamma, phi):
    """n x 6 per-instance ELBO terms, in the order of ``inference.ELBO_TERMS``."""
    n = counts.shape[0]
    terms = np.empty((n, N_TERMS))
    _elbo_rows(np.ascontiguousarray(alpha, dtype=np.float64), np.ascontiguousarray(log_beta, dtype=np.float64),
               np.ascontiguousarray(counts, dtype=np.float64), np.ascontiguousarray(clusters, dtype=np.int64),
               np.ascontiguousarray(gamma, dtype=np.float64), np.ascontiguousarray(phi, dtype=np.float64),
               terms, _DG, float(_DIGAMMA_SHIFT), _LG, float(_LGAMMA_SHIFT))
    return terms
