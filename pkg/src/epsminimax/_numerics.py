"""Small 1-D numerical helpers shared by the problem modules."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable

import numpy as np

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
INV_PHI_SQ = (3.0 - math.sqrt(5.0)) / 2.0

# max_z |z * phi(z)|, attained at z = 1; bounds the second derivative of Phi
PHI_PRIME_MAX = math.exp(-0.5) / math.sqrt(2.0 * math.pi)
PHI_AT_ZERO = 1.0 / math.sqrt(2.0 * math.pi)


def golden_section_max(
    f: Callable[[float], float], a: float, b: float, tol: float = 1e-10
) -> tuple[float, float]:
    """Maximize ``f`` on ``[a, b]`` by golden-section search.

    Returns ``(x, f(x))`` for the best point evaluated, endpoints included,
    so the result never falls below ``max(f(a), f(b))`` even when ``f`` is
    not unimodal on the interval.
    """
    a, b = min(a, b), max(a, b)
    best_x, best_f = a, f(a)
    fb = f(b)
    if fb > best_f:
        best_x, best_f = b, fb
    h = b - a
    if h <= tol:
        return best_x, best_f

    n = int(math.ceil(math.log(tol / h) / math.log(INV_PHI)))
    c = a + INV_PHI_SQ * h
    d = a + INV_PHI * h
    fc, fd = f(c), f(d)
    for _ in range(n):
        if fc > fd:
            b, d, fd = d, c, fc
            h *= INV_PHI
            c = a + INV_PHI_SQ * h
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            h *= INV_PHI
            d = a + INV_PHI * h
            fd = f(d)
    for x, fx in ((c, fc), (d, fd)):
        if fx > best_f:
            best_x, best_f = x, fx
    return best_x, best_f


def golden_section_max_batch(
    f: Callable[[np.ndarray], np.ndarray], a: np.ndarray, b: np.ndarray, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise golden-section search for many independent 1-D problems.

    ``f`` maps a vector of arguments (one per problem) to their values.  As in
    :func:`golden_section_max`, the endpoints are candidates too.
    """
    a, b = np.minimum(a, b).astype(float), np.maximum(a, b).astype(float)
    fa, fb = f(a), f(b)
    best_x, best_f = np.where(fb > fa, b, a), np.maximum(fa, fb)
    h = b - a
    h_max = float(h.max()) if h.size else 0.0
    if h_max <= tol:
        return best_x, best_f
    n = int(math.ceil(math.log(tol / h_max) / math.log(INV_PHI)))
    c, d = a + INV_PHI_SQ * h, a + INV_PHI * h
    fc, fd = f(c), f(d)
    for _ in range(n):
        left = fc > fd
        h = h * INV_PHI
        # left: keep [a, d]; right: keep [c, b]
        a = np.where(left, a, c)
        new_c = np.where(left, a + INV_PHI_SQ * h, d)
        new_d = np.where(left, c, a + INV_PHI * h)
        f_new = f(np.where(left, new_c, new_d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = new_c, new_d
    for x, fx in ((c, fc), (d, fd)):
        better = fx > best_f
        best_x, best_f = np.where(better, x, best_x), np.where(better, fx, best_f)
    return best_x, best_f


def bisect_root(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    ftol: float = 1e-10,
    max_iter: int = 200,
) -> float:
    """Root of ``f`` on ``[lo, hi]`` by bisection, stopping once ``|f| <= ftol``.

    ``f(lo)`` and ``f(hi)`` must have opposite signs (or one of them be zero).
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0.0) == (fhi > 0.0):
        raise ValueError(f"no sign change on [{lo}, {hi}]: f={flo:.3g}, {fhi:.3g}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if abs(fmid) <= ftol or hi - lo <= 1e-15 * max(1.0, abs(mid)):
            return mid
        if (fmid > 0.0) == (flo > 0.0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@lru_cache(maxsize=8)
def gauss_legendre_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n``-point Gauss-Legendre nodes and weights mapped to ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights
