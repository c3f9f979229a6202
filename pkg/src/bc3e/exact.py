"""Order-independent summation over instances.

A site cannot send its rounded partial sum and have the aggregator reproduce
the centralized total: float addition is not associative. Instead each
partial is shipped as a non-overlapping expansion (components whose exact
sum equals the exact sum of the site's terms). ``math.fsum`` of every
component from every site is then the correctly rounded total, which is
exactly what ``math.fsum`` over all the raw terms gives centrally.
"""

import math

import numpy as np

from .errors import NumericalError

# Components needed for any finite total below 2**40 on the 2**-1074 grid is at
# most 22; two spare slots.
EXPANSION_WIDTH = 24


def exact_total(values) -> float:
    """Correctly rounded sum, independent of term order."""
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist())


def expansion(values, width: int = EXPANSION_WIDTH) -> np.ndarray:
    """Fixed-width expansion whose components sum exactly to ``sum(values)``."""
    terms = np.asarray(values, dtype=np.float64).ravel().tolist()
    if not all(math.isfinite(t) for t in terms):
        raise NumericalError("non-finite term in an aggregate sum")
    comps = []
    residual = math.fsum(terms)
    while residual != 0.0:
        comps.append(residual)
        if len(comps) > width:
            raise NumericalError(f"sum needs more than {width} expansion components")
        residual = math.fsum(terms + [-c for c in comps])
    out = np.zeros(width)
    out[: len(comps)] = comps
    return out


def merge(expansions, extra_values=(), width: int = EXPANSION_WIDTH) -> np.ndarray:
    """Exact expansion of the union of several expansions and extra raw terms."""
    parts = [np.asarray(e, dtype=np.float64).ravel() for e in expansions]
    parts.append(np.asarray(extra_values, dtype=np.float64).ravel())
    return expansion(np.concatenate(parts), width)


def collapse(expansions) -> float:
    """Correctly rounded value of the exact sum of all given expansions."""
    return exact_total(np.concatenate([np.asarray(e, dtype=np.float64).ravel() for e in expansions]))
