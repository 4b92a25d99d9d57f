"""Adaptive composite Gauss-Legendre quadrature.

Small, dependency-light integrator used for the cusp normalising constant.
The integrand may return several rows at once so that a density and its
moments are integrated on an identical set of nodes.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import NumericalError


@lru_cache(maxsize=8)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1] (cached, read-only)."""
    x, w = leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


@dataclass(frozen=True)
class QuadratureResult:
    values: np.ndarray  # one integral per integrand row
    error: float  # estimated absolute error of values[0]
    nodes: np.ndarray
    weights: np.ndarray
    n_panels: int


def _rule(f, a, b, x, w):
    half = 0.5 * (b - a)
    nodes = 0.5 * (b + a) + half * x
    return np.atleast_2d(f(nodes)) @ (half * w), nodes, half * w


def adaptive_gauss_legendre(f, a: float, b: float, *, rtol: float = 1e-13,
                            atol: float = 0.0, order: int = 16,
                            initial_panels: int = 8, max_panels: int = 4096,
                            noise: float = 0.0, points=()) -> QuadratureResult:
    """Integrate ``f`` over ``[a, b]`` by globally adaptive panel bisection.

    Every panel carries the estimate from its two halves and the error
    ``|whole - halves|``. The panel with the largest error is split until the
    summed error is below ``max(rtol * |I|, atol)``. ``noise`` is the relative
    accuracy of ``f`` itself; once the worst panel is at that level, further
    splitting cannot help and the loop stops. The error test applies to the
    first integrand row. ``points`` inside the interval are added as initial
    panel edges (use them for narrow peaks).

    Raises
    ------
    NumericalError
        If ``max_panels`` is reached before the tolerance is met.
    """
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise NumericalError(f"invalid integration interval [{a}, {b}]")
    x, w = gauss_legendre(order)
    noise = max(noise, 64.0 * np.finfo(float).eps)

    def make(lo, hi, whole):
        mid = 0.5 * (lo + hi)
        left, right = _rule(f, lo, mid, x, w), _rule(f, mid, hi, x, w)
        est = left[0] + right[0]
        err = abs(whole[0] - est[0])
        return (-err, lo, hi, est, left, right)

    edges = np.linspace(a, b, initial_panels + 1)
    inner = [p for p in points if a < p < b]
    if inner:
        edges = np.unique(np.concatenate([edges, inner]))
    heap = [make(lo, hi, _rule(f, lo, hi, x, w)[0]) for lo, hi in zip(edges[:-1], edges[1:])]
    heapq.heapify(heap)
    while True:
        total = np.sum([p[3] for p in heap], axis=0)
        err = -sum(p[0] for p in heap)
        worst = heap[0]
        if err <= max(rtol * abs(total[0]), atol):
            break
        if -worst[0] <= noise * abs(worst[3][0]):
            break
        if len(heap) >= max_panels:
            raise NumericalError(
                f"quadrature did not converge on [{a}, {b}] within {max_panels} panels "
                f"(estimated error {err:.3e})")
        heapq.heappop(heap)
        _, lo, hi, _, left, right = worst
        mid = 0.5 * (lo + hi)
        heapq.heappush(heap, make(lo, mid, left[0]))
        heapq.heappush(heap, make(mid, hi, right[0]))
    nodes = np.concatenate([q[1] for p in heap for q in (p[4], p[5])])
    weights = np.concatenate([q[2] for p in heap for q in (p[4], p[5])])
    order_idx = np.argsort(nodes)
    return QuadratureResult(total, err, nodes[order_idx], weights[order_idx], 2 * len(heap))
