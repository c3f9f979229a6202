"""Special functions and log-space helpers.

Everything here is elementwise over numpy arrays, and reductions along the
last axis are unrolled column by column. A row's result therefore never
depends on how many other rows share the array, which the distributed mode
relies on for bit-identical results.
"""

import math

import numpy as np

from .errors import AllNegativeInfinity, DomainError

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# ln x - 1/(2x) - sum B_2k / (2k x^2k)
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
)

# 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
_TRIGAMMA_SERIES = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
)

# Stirling: B_2k / (2k (2k-1) x^(2k-1))
_LGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

_DIGAMMA_SHIFT = 6.0
_LGAMMA_SHIFT = 10.0


def _scalar(x, name):
    """Return x as a float if it is a scalar, else None; checks the domain."""
    if isinstance(x, (float, int, np.floating, np.integer)):
        v = float(x)
        if not v > 0:
            raise DomainError(f"{name} requires x > 0, got {v!r}")
        return v
    return None


def _poly_scalar(coeffs, t):
    acc = coeffs[-1]
    for c in coeffs[-2::-1]:
        acc = acc * t + c
    return acc


def _reciprocal_scalar(z):
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


def _digamma_scalar(x):
    steps = []
    j = 0
    while x + j < _DIGAMMA_SHIFT:
        steps.append(_reciprocal_scalar(x + j))
        j += 1
    z = x + j
    inv2 = 1.0 / (z * z)
    res = math.log(z) - 0.5 / z - inv2 * _poly_scalar(_DIGAMMA_SERIES, inv2)
    for _, lo in steps:
        res -= lo
    for hi, _ in reversed(steps):
        res -= hi
    return res


def _trigamma_scalar(x):
    steps = []
    j = 0
    while x + j < _DIGAMMA_SHIFT:
        steps.append(1.0 / ((x + j) * (x + j)))
        j += 1
    z = x + j
    inv = 1.0 / z
    inv2 = inv * inv
    res = inv + 0.5 * inv2 + inv2 * inv * _poly_scalar(_TRIGAMMA_SERIES, inv2)
    for step in reversed(steps):
        res += step
    return res


def _log_gamma_scalar(x):
    if x == 1.0 or x == 2.0:
        return 0.0
    prod = 1.0
    j = 0
    while x + j < _LGAMMA_SHIFT:
        prod *= x + j
        j += 1
    z = x + j
    inv = 1.0 / z
    series = inv * _poly_scalar(_LGAMMA_SERIES, inv * inv)
    return (z - 0.5) * math.log(z) - z + _HALF_LOG_2PI + series - math.log(prod)


def _as_positive(x, name):
    arr = np.array(x, dtype=np.float64)  # always a fresh contiguous copy
    if not np.all(arr > 0):
        bad = arr[~(arr > 0)].ravel()[0]
        raise DomainError(f"{name} requires x > 0, got {bad!r}")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def _poly(coeffs, t):
    # Horner in t; coeffs[0] is the lowest order term.
    acc = np.full_like(t, coeffs[-1])
    for c in coeffs[-2::-1]:
        acc = acc * t + c
    return acc


def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _reciprocal(z):
    """1/z as an unevaluated sum hi + lo (Dekker's exact product for the residual)."""
    hi = 1.0 / z
    p = hi * z
    ah, al = _split(hi)
    bh, bl = _split(z)
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    lo = ((1.0 - p) - err) / z
    return hi, lo


def _shifts(z, shift):
    """All recurrence arguments z + j (j < shift) at once; masked where z + j >= shift."""
    zj = z[..., None] + np.arange(int(shift), dtype=np.float64)
    low = zj < shift
    return zj, low, z + row_sum(low.astype(np.float64))


def digamma(x):
    """psi(x) for x > 0 via upward recurrence to x >= 6 and the asymptotic series."""
    v = _scalar(x, "digamma")
    if v is not None:
        return _digamma_scalar(v)
    z = _as_positive(x, "digamma")
    zj, low, z = _shifts(z, _DIGAMMA_SHIFT)
    hi, lo = _reciprocal(np.where(low, zj, 1.0))
    hi = np.where(low, hi, 0.0)
    lo = np.where(low, lo, 0.0)
    inv2 = 1.0 / (z * z)
    series = inv2 * _poly(_DIGAMMA_SERIES, inv2)
    res = np.log(z) - 0.5 / z - series
    for j in range(hi.shape[-1]):
        res = res - lo[..., j]
    # smallest reciprocal first so the dominant 1/x is subtracted last
    for j in range(hi.shape[-1] - 1, -1, -1):
        res = res - hi[..., j]
    return _out(res, x)


def trigamma(x):
    """psi'(x) for x > 0, same recurrence/series scheme as :func:`digamma`."""
    v = _scalar(x, "trigamma")
    if v is not None:
        return _trigamma_scalar(v)
    z = _as_positive(x, "trigamma")
    zj, low, z = _shifts(z, _DIGAMMA_SHIFT)
    zj = np.where(low, zj, 1.0)
    steps = np.where(low, 1.0 / (zj * zj), 0.0)
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv2 * inv * _poly(_TRIGAMMA_SERIES, inv2)
    res = inv + 0.5 * inv2 + series
    for j in range(steps.shape[-1] - 1, -1, -1):
        res = res + steps[..., j]
    return _out(res, x)


def log_gamma(x):
    """log Gamma(x) for x > 0 (Stirling series after shifting to x >= 10)."""
    v = _scalar(x, "log_gamma")
    if v is not None:
        return _log_gamma_scalar(v)
    z = _as_positive(x, "log_gamma")
    exact_zero = (z == 1.0) | (z == 2.0)
    zj, low, z = _shifts(z, _LGAMMA_SHIFT)
    factors = np.where(low, zj, 1.0)
    prod = factors[..., 0].copy()
    for j in range(1, factors.shape[-1]):
        prod = prod * factors[..., j]
    inv = 1.0 / z
    inv2 = inv * inv
    series = inv * _poly(_LGAMMA_SERIES, inv2)
    res = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series - np.log(prod)
    res = np.where(exact_zero, 0.0, res)
    return _out(res, x)


def row_sum(a):
    """Sum over the last axis, left to right, one column at a time."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] == 0:
        return np.zeros(a.shape[:-1])
    acc = a[..., 0].copy()
    for j in range(1, a.shape[-1]):
        acc = acc + a[..., j]
    return acc


def row_max(a):
    a = np.asarray(a, dtype=np.float64)
    acc = a[..., 0].copy()
    for j in range(1, a.shape[-1]):
        acc = np.maximum(acc, a[..., j])
    return acc


def normalize_rows(log_weights):
    """Row-wise softmax of an (..., q) array of log weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    top = row_max(lw)
    if not np.all(np.isfinite(top)):
        raise AllNegativeInfinity("every log weight in a row is -inf (or a NaN is present)")
    w = np.exp(np.ascontiguousarray(lw - top[..., None]))
    return w / row_sum(w)[..., None]


def normalize_in_log_space(log_weights):
    """Normalized probability vector from a length-q vector of log weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.ndim != 1 or lw.size == 0:
        raise ValueError("expected a non-empty 1-D vector of log weights")
    return normalize_rows(lw[None, :])[0]
