"""Deterministic and stochastic cusp catastrophe.

The cusp potential is ``V(y) = -y**4/4 + beta*y**2/2 + alpha*y`` and the
stationary density of the stochastic cusp is ``psi * exp(V(y))``. The
equilibria solve ``-y**3 + beta*y + alpha = 0``; the number of real roots is
decided by the Cardan discriminant ``alpha**2/4 - beta**3/27``.

Scalar helpers (``potential``, ``equilibria``, ``DensityWorkspace`` ...) take a
:class:`ControlPoint`. The ``*_batch`` functions are vectorised over arrays of
control values and are what the likelihood uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .quadrature import adaptive_gauss_legendre, gauss_legendre

# log-density drop (nats) below the highest mode at which the batch support ends
TAIL_DROP = 50.0
# panel width of the batch rule, in units of the narrowest mode's std. deviation
PANEL_SDS = 3.0
MIN_PANELS = 6
MAX_PANELS = 512


@dataclass(frozen=True)
class ControlPoint:
    """Asymmetry (``alpha``) and bifurcation (``beta``) control values."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError(f"control point must be finite, got {self}")


def potential(y, c: ControlPoint):
    return -0.25 * y**4 + 0.5 * c.beta * y**2 + c.alpha * y


def log_kernel(y, alpha, beta):
    """Unnormalised log-density; broadcasts over all arguments."""
    y2 = y * y
    return -0.25 * y2 * y2 + 0.5 * beta * y2 + alpha * y


def cardan_discriminant(c: ControlPoint) -> float:
    return 0.25 * c.alpha**2 - c.beta**3 / 27.0


# ---------------------------------------------------------------------------
# cubic roots


def _polish(y, alpha, beta, steps=3):
    for _ in range(steps):
        g = y * y * y - beta * y - alpha
        dg = 3.0 * y * y - beta
        ok = np.abs(dg) > 1e-300
        y = np.where(ok, y - g / np.where(ok, dg, 1.0), y)
    return y


def outer_roots_batch(alpha, beta):
    """Smallest and largest real root of ``y**3 - beta*y - alpha``.

    Returns ``(low, high, three)`` where ``three`` marks the points with a
    negative discriminant (three distinct real roots). Where ``three`` is
    false, ``low == high`` is the single simple root.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    alpha, beta = np.broadcast_arrays(alpha, beta)
    delta = 0.25 * alpha**2 - beta**3 / 27.0
    three = delta < 0.0
    low = np.empty(alpha.shape)
    high = np.empty(alpha.shape)

    if three.any():
        a, b = alpha[three], beta[three]
        r = 2.0 * np.sqrt(b / 3.0)
        arg = np.clip(1.5 * a / b * np.sqrt(3.0 / b), -1.0, 1.0)
        phi = np.arccos(arg) / 3.0
        high[three] = r * np.cos(phi)
        low[three] = r * np.cos(phi + 2.0 * np.pi / 3.0)

    one = ~three
    if one.any():
        a, b, d = alpha[one], beta[one], delta[one]
        sign = np.where(a < 0.0, -1.0, 1.0)
        u = np.cbrt(0.5 * a + sign * np.sqrt(d))
        nz = u != 0.0
        root = np.where(nz, u + (b / 3.0) / np.where(nz, u, 1.0), 0.0)
        low[one] = root
        high[one] = root

    low = _polish(low, alpha, beta)
    high = _polish(high, alpha, beta)
    return low, high, three


@dataclass(frozen=True)
class Equilibrium:
    y: float
    stable: bool  # a mode of the stationary density; unstable = anti-prediction


def equilibria(c: ControlPoint) -> list[Equilibrium]:
    """Real equilibria of the cusp, ordered by ``y``.

    With three roots the outer two are stable and the middle one is the
    anti-prediction. On the bifurcation set (discriminant exactly zero, not at
    the cusp point) the simple root is returned as stable and the double root
    as unstable.
    """
    low, high, three = outer_roots_batch(c.alpha, c.beta)
    low, high = float(low), float(high)
    if bool(three):
        mid = float(_polish(np.array(-(low + high)), c.alpha, c.beta))
        return [Equilibrium(low, True), Equilibrium(mid, False), Equilibrium(high, True)]
    if cardan_discriminant(c) == 0.0 and c.alpha != 0.0:
        double = -0.5 * low
        pts = sorted([Equilibrium(low, True), Equilibrium(double, False)], key=lambda e: e.y)
        return pts
    return [Equilibrium(low, True)]


def modes(c: ControlPoint) -> list[float]:
    """Modes of the stationary density (the stable equilibria)."""
    return [e.y for e in equilibria(c) if e.stable]


# ---------------------------------------------------------------------------
# scalar density with adaptive quadrature


@dataclass(frozen=True, eq=False)
class DensityWorkspace:
    """Normalising constant and moments of the stationary density at one control.

    Built by :func:`normalization_constant`. Immutable and safe to share.
    """

    control: ControlPoint
    lower: float
    upper: float
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    log_norm: float  # log of the integral of exp(V); psi = exp(-log_norm)
    mean: float
    second: float
    third: float
    error: float

    @property
    def psi(self) -> float:
        return math.exp(-self.log_norm)

    @property
    def log_psi(self) -> float:
        return -self.log_norm


def _tail_bound(y, c, vmax):
    # beyond the outer modes V is concave, so the tail mass is <= exp(V)/|V'|
    slope = abs(-y**3 + c.beta * y + c.alpha)
    if slope == 0.0:
        return math.inf
    return math.exp(potential(y, c) - vmax) / slope


def normalization_constant(c: ControlPoint, *, pad: float = 8.0,
                           tail_tol: float = 1e-12, rtol: float = 1e-13) -> DensityWorkspace:
    """Integrate ``exp(V)`` adaptively and return a :class:`DensityWorkspace`.

    The support starts at ``[m_low - pad, m_high + pad]`` (outer equilibria)
    and is doubled on each side until the bounded tail mass is below
    ``tail_tol`` relative to the total.
    """
    eq = equilibria(c)
    m_low, m_high = eq[0].y, eq[-1].y
    vmax = max(potential(e.y, c) for e in eq if e.stable)
    left, right = pad, pad
    for _ in range(60):
        lo, hi = m_low - left, m_high + right
        # The bound is relative to exp(vmax); the integral is at least of the
        # order of the mode's width, so this is conservative once pad >~ 1.
        lb, rb = _tail_bound(lo, c, vmax), _tail_bound(hi, c, vmax)
        if lb < tail_tol * 1e-3 and rb < tail_tol * 1e-3:
            break
        if lb >= tail_tol * 1e-3:
            left *= 2.0
        if rb >= tail_tol * 1e-3:
            right *= 2.0
    else:
        raise NumericalError(f"could not bound the density tails for {c}")

    def integrand(y):
        e = np.exp(log_kernel(y, c.alpha, c.beta) - vmax)
        return np.vstack([e, y * e, y * y * e, y**3 * e])

    # rounding in V near the modes limits the attainable relative accuracy
    m = max(abs(m_low), abs(m_high))
    scale = 0.25 * m**4 + 0.5 * abs(c.beta) * m * m + abs(c.alpha) * m + abs(vmax)
    noise = 8.0 * np.finfo(float).eps * max(scale, 1.0)
    curv = max(3.0 * e.y**2 - c.beta for e in eq if e.stable)
    panels = int(np.clip(np.ceil((hi - lo) * math.sqrt(max(curv, 1e-12)) / PANEL_SDS), 8, 1024))
    res = adaptive_gauss_legendre(integrand, lo, hi, rtol=rtol, noise=noise,
                                  initial_panels=panels, points=[e.y for e in eq])
    z = res.values[0]
    if not (z > 0.0 and np.isfinite(z)):
        raise NumericalError(f"normalising integral is {z} for {c} on [{lo}, {hi}]")
    return DensityWorkspace(
        control=c, lower=lo, upper=hi, nodes=res.nodes, weights=res.weights,
        log_norm=math.log(z) + vmax, mean=res.values[1] / z,
        second=res.values[2] / z, third=res.values[3] / z, error=res.error / z)


def density(y, c: ControlPoint, w: DensityWorkspace):
    """Stationary density ``psi * exp(V(y))``."""
    if w.control != c:
        raise ValueError(f"workspace was built for {w.control}, not {c}")
    return np.exp(log_kernel(np.asarray(y, dtype=float), c.alpha, c.beta) - w.log_norm)


def delay_prediction(y_obs: float, c: ControlPoint) -> float:
    """Density mode nearest to ``y_obs``.

    Ties go to the mode with higher density, then to the larger mode.
    """
    return float(delay_prediction_batch(np.array([y_obs]), np.array([c.alpha]),
                                        np.array([c.beta]))[0])


# ---------------------------------------------------------------------------
# vectorised versions used by the likelihood


def delay_prediction_batch(y, alpha, beta):
    low, high, three = outer_roots_batch(alpha, beta)
    d_low = np.abs(y - low)
    d_high = np.abs(y - high)
    v_low = log_kernel(low, alpha, beta)
    v_high = log_kernel(high, alpha, beta)
    pick_high = (d_high < d_low) | ((d_high == d_low) & (v_high >= v_low))
    return np.where(three & ~pick_high, low, high)


def batch_support(alpha, beta, tail_drop=TAIL_DROP):
    """Support ``[lo, hi]`` and log-density peak for each control point.

    The ends are where the log-density has fallen ``tail_drop`` nats below its
    maximum, found by bisection outwards from the outer modes.
    """
    low, high, _ = outer_roots_batch(alpha, beta)
    v_low = log_kernel(low, alpha, beta)
    v_high = log_kernel(high, alpha, beta)
    vmax = np.maximum(v_low, v_high)
    curv = np.maximum(3.0 * low**2 - beta, 3.0 * high**2 - beta)
    s_low = _tail_distance(low, beta, tail_drop - (vmax - v_low), -1.0)
    s_high = _tail_distance(high, beta, tail_drop - (vmax - v_high), 1.0)
    return low - s_low, high + s_high, vmax, curv


def _tail_distance(m, beta, target, sign):
    # V(m) - V(m + sign*s), expanded exactly around the outer mode m where
    # V'(m) = 0 and c2 = -V''(m) >= 0; the drop increases with s.
    c2 = 3.0 * m * m - beta
    cm = sign * m
    target = np.maximum(target, 0.0)

    def drop(s):
        return 0.5 * c2 * s * s + cm * s**3 + 0.25 * s**4

    lo = np.zeros_like(m)
    # s**4/4 + cm*s**3 >= target once s exceeds this bound
    hi = (4.0 * target) ** 0.25 + 4.0 * np.maximum(-cm, 0.0)
    s = hi.copy()
    for _ in range(12):
        f = drop(s) - target
        hi = np.where(f >= 0.0, s, hi)
        lo = np.where(f < 0.0, s, lo)
        slope = s * (c2 + 3.0 * cm * s + s * s)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = s - f / slope
        inside = (step > lo) & (step < hi)
        s = np.where(inside, step, 0.5 * (lo + hi))
    return hi


def log_normalizer_batch(alpha, beta, *, order=16, n_panels=None, third=False):
    """Log of the normalising integral and first moments for every control point.

    Returns ``(log_norm, mean, second)`` (plus ``third`` moment if requested),
    where ``psi = exp(-log_norm)``. All rows share one composite
    Gauss-Legendre rule with ``n_panels`` panels of ``order`` nodes mapped to
    each row's own support; by default the panel count is chosen so that the
    narrowest mode spans several panels.
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    lo, hi, vmax, curv = batch_support(alpha, beta)
    width = hi - lo
    if n_panels is None:
        need = np.max(width * np.sqrt(np.maximum(curv, 1e-12))) / PANEL_SDS
        n_panels = int(np.clip(np.ceil(need), MIN_PANELS, MAX_PANELS))
    x, w = gauss_legendre(order)
    # node positions in [0, 1] shared by every row
    centers = (np.arange(n_panels) + 0.5) / n_panels
    unit = (centers[:, None] + (0.5 / n_panels) * x[None, :]).ravel()
    unit_w = np.tile((0.5 / n_panels) * w, n_panels)
    y = lo[:, None] + width[:, None] * unit[None, :]
    e = np.exp(log_kernel(y, alpha[:, None], beta[:, None]) - vmax[:, None])
    e *= unit_w[None, :]
    z = e.sum(axis=1)
    ey = e * y
    m1 = ey.sum(axis=1) / z
    eyy = ey * y
    m2 = eyy.sum(axis=1) / z
    log_norm = np.log(z * width) + vmax
    if third:
        m3 = (eyy * y).sum(axis=1) / z
        return log_norm, m1, m2, m3
    return log_norm, m1, m2
