"""Maximum-likelihood fit of the stochastic cusp and its two baselines.

The observed state ``r`` (normalised returns) is mapped to the canonical cusp
variable by ``y = omega0 + omega1 * r``; the control functions are linear in
the covariates::

    alpha_t = alpha_0 + sum_i alpha_i x_it     (covariates where alpha_mask)
    beta_t  = beta_0  + sum_i beta_i  x_it     (covariates where beta_mask)

Each observation contributes ``log psi_t + V(y_t; alpha_t, beta_t) + log|omega1|``
to the log-likelihood, with its own normalising constant ``psi_t``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special, stats

from .cusp import delay_prediction_batch, log_kernel, log_normalizer_batch
from .errors import ConfigError, DataError, NonFiniteLikelihood, NumericalError
from .rv import DailyPanel

log = logging.getLogger(__name__)

DEFAULT_STARTS = 5
MAX_ITER = 500
GTOL = 1e-6
# precision-loss exits are accepted as converged below this gradient max-norm
LOOSE_GTOL = 1e-3
BETA_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# model spec


@dataclass(frozen=True)
class CuspSpec:
    """Covariates and which of them enter each control function.

    Intercepts ``alpha_0`` and ``beta_0`` are always free.
    """

    covariates: tuple[str, ...]
    alpha_mask: tuple[bool, ...]
    beta_mask: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "alpha_mask", tuple(bool(m) for m in self.alpha_mask))
        object.__setattr__(self, "beta_mask", tuple(bool(m) for m in self.beta_mask))
        n = len(self.covariates)
        if len(self.alpha_mask) != n or len(self.beta_mask) != n:
            raise ConfigError("alpha_mask and beta_mask need one entry per covariate")
        if len(set(self.covariates)) != n:
            raise ConfigError("covariate names must be unique")
        if not any(self.alpha_mask) and not any(self.beta_mask):
            raise ConfigError("at least one covariate must be free")

    @classmethod
    def full(cls, covariates: Sequence[str]) -> "CuspSpec":
        n = len(covariates)
        return cls(tuple(covariates), (True,) * n, (True,) * n)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CuspSpec":
        try:
            names = list(d["covariates"])
        except (KeyError, TypeError):
            raise ConfigError("spec needs a 'covariates' list") from None

        def mask(key):
            m = d.get(key)
            if m is None:
                return (True,) * len(names)
            if m and isinstance(m[0], str):  # list of names that are free
                unknown = set(m) - set(names)
                if unknown:
                    raise ConfigError(f"{key} names unknown covariates {sorted(unknown)}")
                return tuple(n in m for n in names)
            return tuple(bool(v) for v in m)

        return cls(tuple(names), mask("alpha_mask"), mask("beta_mask"))

    @classmethod
    def from_json(cls, path) -> "CuspSpec":
        from pathlib import Path

        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {"covariates": list(self.covariates), "alpha_mask": list(self.alpha_mask),
                "beta_mask": list(self.beta_mask)}

    @property
    def alpha_names(self) -> list[str]:
        return [c for c, m in zip(self.covariates, self.alpha_mask) if m]

    @property
    def beta_names(self) -> list[str]:
        return [c for c, m in zip(self.covariates, self.beta_mask) if m]

    def control_names(self) -> list[str]:
        return (["alpha_0"] + [f"alpha_{c}" for c in self.alpha_names]
                + ["beta_0"] + [f"beta_{c}" for c in self.beta_names])

    def param_names(self) -> list[str]:
        return ["omega0", "omega1"] + self.control_names()

    @property
    def n_alpha(self) -> int:
        return 1 + len(self.alpha_names)

    @property
    def n_params(self) -> int:
        return 2 + self.n_alpha + 1 + len(self.beta_names)

    def designs(self, panel: DailyPanel) -> tuple[np.ndarray, np.ndarray]:
        """Design matrices (with intercept column) for alpha_t and beta_t."""
        ones = np.ones((len(panel), 1))
        xa = np.hstack([ones, panel.covariate_matrix(self.alpha_names)])
        xb = np.hstack([ones, panel.covariate_matrix(self.beta_names)])
        return xa, xb


# ---------------------------------------------------------------------------
# likelihood


class CuspLikelihood:
    """Negative log-likelihood and gradient for fixed data.

    Parameters are ordered ``[omega0, omega1, alpha..., beta...]`` as in
    :meth:`CuspSpec.param_names`.
    """

    def __init__(self, r, xa, xb):
        self.r = np.asarray(r, dtype=float)
        self.xa = xa
        self.xb = xb
        self.ka = xa.shape[1]
        if not np.all(np.isfinite(self.r)):
            raise DataError("state variable contains non-finite values")
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))):
            raise DataError("covariates contain non-finite values")

    @classmethod
    def from_panel(cls, panel: DailyPanel, spec: CuspSpec, state="ret_norm"):
        xa, xb = spec.designs(panel)
        return cls(panel.column(state), xa, xb)

    @property
    def n_obs(self):
        return len(self.r)

    def controls(self, theta):
        theta = np.asarray(theta, dtype=float)
        alpha = self.xa @ theta[2:2 + self.ka]
        beta = self.xb @ theta[2 + self.ka:]
        return alpha, beta

    def canonical(self, theta):
        return theta[0] + theta[1] * self.r

    def loglik_terms(self, theta):
        y = self.canonical(theta)
        alpha, beta = self.controls(theta)
        log_norm, _, _ = log_normalizer_batch(alpha, beta)
        terms = log_kernel(y, alpha, beta) - log_norm + math.log(abs(theta[1]))
        self._check(terms)
        return terms

    def _check(self, terms):
        bad = ~np.isfinite(terms)
        if bad.any():
            raise NonFiniteLikelihood(int(np.flatnonzero(bad)[0]))

    def __call__(self, theta):
        return -float(np.sum(self.loglik_terms(np.asarray(theta, dtype=float))))

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        w1 = theta[1]
        if w1 == 0.0:
            raise NonFiniteLikelihood(0, "omega1 is zero")
        y = self.canonical(theta)
        alpha, beta = self.controls(theta)
        log_norm, ey, eyy = log_normalizer_batch(alpha, beta)
        terms = log_kernel(y, alpha, beta) - log_norm + math.log(abs(w1))
        self._check(terms)
        # d(-ll)/dy, d(-ll)/dalpha, d(-ll)/dbeta per observation
        dy = y**3 - beta * y - alpha
        da = ey - y
        db = 0.5 * (eyy - y * y)
        grad = np.concatenate([
            [dy.sum(), dy @ self.r - self.n_obs / w1],
            self.xa.T @ da,
            self.xb.T @ db,
        ])
        return -float(terms.sum()), grad

    def gradient(self, theta):
        return self.value_and_grad(theta)[1]


def negative_log_likelihood(params, panel: DailyPanel, spec: CuspSpec, *,
                            state: str = "ret_norm", gradient: bool = False):
    """NLL of the cusp model at ``params`` (and its gradient if requested)."""
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.n_params,):
        raise ConfigError(f"expected {spec.n_params} parameters, got {params.shape}")
    lik = CuspLikelihood.from_panel(panel, spec, state)
    return lik.value_and_grad(params) if gradient else lik(params)


# ---------------------------------------------------------------------------
# fit records


@dataclass
class CuspFit:
    spec: CuspSpec
    params: np.ndarray
    stderr: np.ndarray
    z: np.ndarray
    loglik: float
    n_obs: int
    pseudo_r2: float
    converged: bool
    degenerate: bool = False
    hessian_pd: bool = True
    state: str = "ret_norm"
    message: str = ""
    grad_max: float = float("nan")
    n_iter: int = 0
    start_nlls: list = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    model = "cusp"

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def nll(self) -> float:
        return -self.loglik

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_params * math.log(self.n_obs)

    @property
    def r2(self) -> float:
        return self.pseudo_r2

    @property
    def param_names(self) -> list[str]:
        return self.spec.param_names()

    @property
    def omega0(self) -> float:
        return float(self.params[0])

    @property
    def omega1(self) -> float:
        return float(self.params[1])

    @property
    def alpha_coefs(self) -> dict[str, float]:
        ka = self.spec.n_alpha
        return dict(zip(self.param_names[2:2 + ka], map(float, self.params[2:2 + ka])))

    @property
    def beta_coefs(self) -> dict[str, float]:
        ka = self.spec.n_alpha
        return dict(zip(self.param_names[2 + ka:], map(float, self.params[2 + ka:])))

    @property
    def omega1_significant(self) -> bool:
        """``omega1`` differs from zero at the 5% level (two-sided z-test)."""
        return bool(np.isfinite(self.z[1]) and abs(self.z[1]) > stats.norm.ppf(0.975))

    def as_dict(self) -> dict:
        names = self.param_names
        return {
            "model": "cusp",
            "state": self.state,
            "spec": self.spec.to_dict(),
            "params": dict(zip(names, map(float, self.params))),
            "stderr": dict(zip(names, map(_num, self.stderr))),
            "z": dict(zip(names, map(_num, self.z))),
            "loglik": self.loglik, "aic": self.aic, "bic": self.bic,
            "pseudo_r2": _num(self.pseudo_r2),
            "n_obs": self.n_obs, "n_params": self.n_params,
            "converged": bool(self.converged), "degenerate": bool(self.degenerate),
            "hessian_pd": bool(self.hessian_pd), "omega1_significant": self.omega1_significant,
            "message": self.message, "grad_max": _num(self.grad_max), "n_iter": self.n_iter,
            "start_nlls": [_num(v) for v in self.start_nlls],
            "data": self.fingerprint,
        }


@dataclass
class BaselineFit:
    """Linear or logistic fit with a Gaussian likelihood."""

    model: str
    param_names: list[str]
    params: np.ndarray
    loglik: float
    n_obs: int
    n_params: int
    r2: float
    converged: bool = True
    degenerate: bool = False
    state: str = "ret_norm"
    message: str = ""
    fingerprint: dict = field(default_factory=dict)

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_params * math.log(self.n_obs)

    def as_dict(self) -> dict:
        return {
            "model": self.model, "state": self.state,
            "params": dict(zip(self.param_names, map(float, self.params))),
            "loglik": _num(self.loglik), "aic": _num(self.aic), "bic": _num(self.bic),
            "r2": _num(self.r2), "n_obs": self.n_obs, "n_params": self.n_params,
            "converged": bool(self.converged), "degenerate": bool(self.degenerate),
            "message": self.message, "data": self.fingerprint,
        }


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _gaussian_loglik(rss, n):
    if rss <= 0.0:
        return float("nan")
    return -0.5 * n * (math.log(2.0 * math.pi * rss / n) + 1.0)


# ---------------------------------------------------------------------------
# cusp fitting


def moment_start(r, xa, xb):
    """Starting values from the stationary-density moment identities.

    ``r`` is standardised to ``z``; then for test functions ``g`` in
    ``{1, z, z**2}`` and every regressor column ``d``,
    ``mean(d * (alpha + beta*z - z**3) * g(z)) = -mean(d * g'(z))``,
    which is linear in the control coefficients and solved by least squares.
    """
    mu, sd = float(np.mean(r)), float(np.std(r))
    z = (r - mu) / sd
    d = np.unique(np.hstack([xa, xb]), axis=1)
    rows, rhs = [], []
    for g, dg in ((np.ones_like(z), np.zeros_like(z)), (z, np.ones_like(z)), (z * z, 2 * z)):
        # coefficient blocks for alpha and beta coefficients
        ca = (d * g[:, None]).T @ xa / len(z)
        cb = (d * (z * g)[:, None]).T @ xb / len(z)
        rows.append(np.hstack([ca, cb]))
        rhs.append(d.T @ (z**3 * g - dg) / len(z))
    coef, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return np.concatenate([[-mu / sd, 1.0 / sd], coef])


def _numerical_hessian(grad, theta):
    k = len(theta)
    h = 1e-4 * np.maximum(np.abs(theta), 1.0)
    hess = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = h[i]
        hess[:, i] = (grad(theta + e) - grad(theta - e)) / (2.0 * h[i])
    return 0.5 * (hess + hess.T)


def _minimize(lik: CuspLikelihood, x0, maxiter):
    def fun(theta):
        try:
            return lik.value_and_grad(theta)
        except NumericalError:
            return np.inf, np.zeros_like(theta)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        res = optimize.minimize(fun, x0, jac=True, method="BFGS",
                                options={"gtol": GTOL, "maxiter": maxiter})
    return res


def fit_cusp(panel: DailyPanel, spec: CuspSpec, init=None, *, state: str = "ret_norm",
             n_starts: int = DEFAULT_STARTS, seed: int | None = 0,
             maxiter: int = MAX_ITER) -> CuspFit:
    """Fit the cusp model by maximum likelihood with BFGS multi-start.

    Starts: ``init`` (if given), the moment start, a neutral start (moment
    ``omega`` with zero control slopes and intercepts), then jittered copies
    of the moment start, ``n_starts`` in total. Standard errors come from the
    inverse of a central-difference Hessian at the optimum.
    """
    k = spec.n_params
    n = len(panel)
    if n < 10 * k:
        raise DataError(f"need at least {10 * k} observations for {k} parameters, got {n}")
    lik = CuspLikelihood.from_panel(panel, spec, state)
    fingerprint = panel.fingerprint([state, *spec.covariates])

    if np.ptp(lik.r) == 0.0:
        params = np.zeros(k)
        params[0] = 0.0
        nan = np.full(k, np.nan)
        return CuspFit(spec, params, nan, nan, float("nan"), n, float("nan"), False,
                       degenerate=True, hessian_pd=False, state=state,
                       message="state variable is constant", fingerprint=fingerprint)

    base = moment_start(lik.r, lik.xa, lik.xb)
    starts = [] if init is None else [np.asarray(init, dtype=float)]
    starts.append(base)
    # small samples can put the moment start on a runaway ridge
    neutral = base.copy()
    neutral[2:] = 0.0
    starts.append(neutral)
    rng = np.random.default_rng(seed)
    while len(starts) < max(n_starts, 1):
        jitter = base.copy()
        jitter[0] += rng.normal(0.0, 0.1)
        jitter[1] *= math.exp(rng.normal(0.0, 0.2))
        jitter[2:] += rng.normal(0.0, 0.5, k - 2)
        starts.append(jitter)
    starts = starts[:max(n_starts, 1)]

    best, start_nlls = None, []
    for x0 in starts:
        res = _minimize(lik, x0, maxiter)
        start_nlls.append(float(res.fun))
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NumericalError("every start produced a non-finite likelihood")

    theta = best.x
    _, grad = lik.value_and_grad(theta)
    gmax = float(np.max(np.abs(grad)))
    converged = bool(best.success or (best.status == 2 and gmax < LOOSE_GTOL))

    hess = _numerical_hessian(lik.gradient, theta)
    try:
        np.linalg.cholesky(hess)
        cov = np.linalg.inv(hess)
        stderr = np.sqrt(np.diag(cov))
        z = theta / stderr
        hessian_pd = True
    except np.linalg.LinAlgError:
        stderr = np.full(k, np.nan)
        z = np.full(k, np.nan)
        hessian_pd = False

    degenerate = not np.isfinite(theta[1]) or abs(theta[1]) < 1e-6
    fit = CuspFit(spec, theta, stderr, z, -float(best.fun), n, float("nan"), converged,
                  degenerate=degenerate, hessian_pd=hessian_pd, state=state,
                  message=str(best.message), grad_max=gmax, n_iter=int(best.nit),
                  start_nlls=start_nlls, fingerprint=fingerprint)
    fit.pseudo_r2 = pseudo_r2(fit, panel)
    return fit


def pseudo_r2(fit: CuspFit, panel: DailyPanel) -> float:
    """``1 - Var(e)/Var(y)`` with ``e`` the distance to the nearest density mode.

    Both ``y`` and the predictions are on the canonical scale
    ``omega0 + omega1 * r``, which leaves the ratio unchanged.
    """
    lik = CuspLikelihood.from_panel(panel, fit.spec, fit.state)
    y = lik.canonical(fit.params)
    var_y = float(np.var(y))
    if var_y == 0.0:
        raise DataError("pseudo-R2 undefined: state variable has zero variance")
    alpha, beta = lik.controls(fit.params)
    eps = y - delay_prediction_batch(y, alpha, beta)
    return 1.0 - float(np.var(eps)) / var_y


# ---------------------------------------------------------------------------
# baselines


def fit_linear(panel: DailyPanel, spec: CuspSpec, *, state: str = "ret_norm") -> BaselineFit:
    """OLS of the state on every covariate of ``spec`` plus an intercept."""
    y = panel.column(state)
    x = np.hstack([np.ones((len(panel), 1)), panel.covariate_matrix(spec.covariates)])
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise DataError("linear design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    n = len(y)
    return BaselineFit(
        "linear", ["intercept", *spec.covariates], coef, _gaussian_loglik(rss, n), n,
        x.shape[1] + 1, 1.0 - rss / tss if tss > 0 else float("nan"),
        degenerate=tss == 0.0, state=state,
        fingerprint=panel.fingerprint([state, *spec.covariates]))


def logistic_curve(theta, xa, xb):
    """``loc + scale / (1 + exp(-alpha_t / beta_t**2))`` with ``|beta_t|`` floored."""
    ka, kb = xa.shape[1], xb.shape[1]
    alpha = xa @ theta[:ka]
    beta = xb @ theta[ka:ka + kb]
    b2 = np.maximum(np.abs(beta), BETA_FLOOR) ** 2
    return theta[-2] + theta[-1] * special.expit(alpha / b2)


def fit_logistic(panel: DailyPanel, spec: CuspSpec, *, state: str = "ret_norm",
                 init_controls=None, n_starts: int = DEFAULT_STARTS,
                 seed: int | None = 0) -> BaselineFit:
    """Nonlinear least-squares fit of the logistic comparison curve.

    The exponent ``alpha_t / beta_t**2`` uses the same linear control
    functions as the cusp spec; ``loc`` and ``scale`` map the unit interval
    onto the data. ``init_controls`` (alpha then beta coefficients, e.g. from
    a cusp fit) is used as the first start.
    """
    y = panel.column(state)
    n = len(y)
    xa, xb = spec.designs(panel)
    ka, kb = xa.shape[1], xb.shape[1]
    names = spec.control_names() + ["loc", "scale"]
    k = ka + kb + 2
    fingerprint = panel.fingerprint([state, *spec.covariates])
    tss = float(np.sum((y - y.mean()) ** 2))
    if np.ptp(y) == 0.0:
        theta = np.zeros(k)
        theta[-2] = y[0] if n else 0.0
        return BaselineFit("logistic", names, theta, float("nan"), n, k + 1, float("nan"),
                           converged=False, degenerate=True, state=state,
                           message="state variable is constant", fingerprint=fingerprint)

    def with_loc_scale(controls):
        u = logistic_curve(np.concatenate([controls, [0.0, 1.0]]), xa, xb)
        design = np.column_stack([np.ones(n), u])
        (loc, scale), *_ = np.linalg.lstsq(design, y, rcond=None)
        return np.concatenate([controls, [loc, scale]])

    rng = np.random.default_rng(seed)
    starts = []
    if init_controls is not None:
        starts.append(np.asarray(init_controls, dtype=float))
    while len(starts) < max(n_starts, 1):
        c = np.concatenate([rng.normal(0.0, 1.0, ka), rng.normal(0.0, 1.0, kb)])
        c[ka] = rng.uniform(0.5, 2.0)
        starts.append(c)

    def resid(theta):
        return logistic_curve(theta, xa, xb) - y

    best = None
    for c in starts[:max(n_starts, 1)]:
        x0 = with_loc_scale(c)
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.least_squares(resid, x0, method="trf", x_scale="jac",
                                         max_nfev=200 * k)
        if best is None or res.cost < best.cost:
            best = res
    theta = best.x
    rss = float(2.0 * best.cost)
    degenerate = abs(theta[-1]) < 1e-8 * max(np.std(y), 1e-300)
    return BaselineFit("logistic", names, theta, _gaussian_loglik(rss, n), n, k + 1,
                       1.0 - rss / tss, converged=bool(best.status > 0), degenerate=degenerate,
                       state=state, message=str(best.message), fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# model comparison


@dataclass(frozen=True)
class LRTest:
    statistic: float
    df: int
    p_value: float
    cusp_worse: bool  # statistic < 0; reported as-is


def lr_test(cusp, linear) -> LRTest:
    """Likelihood-ratio statistic ``2 (LL_cusp - LL_linear)`` against chi-squared."""
    if cusp.n_obs != linear.n_obs:
        raise DataError("likelihood-ratio test needs fits on the same data")
    stat = 2.0 * (cusp.loglik - linear.loglik)
    df = cusp.n_params - linear.n_params
    if stat < 0:
        log.warning("cusp log-likelihood below the linear model (LR statistic %.3g)", stat)
    p = float(stats.chi2.sf(stat, df)) if df > 0 else float("nan")
    return LRTest(float(stat), int(df), p, stat < 0)


@dataclass(frozen=True)
class ModelComparison:
    rows: list[dict]
    winner: str | None  # lowest BIC; None on a tie

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.rows)


def compare_models(fits: Mapping[str, object]) -> ModelComparison:
    """Table of LL/AIC/BIC/R2 per model with the BIC winner marked."""
    if not fits:
        raise ConfigError("no fits to compare")
    n_obs = {f.n_obs for f in fits.values()}
    if len(n_obs) != 1:
        raise DataError(f"fits were made on different sample sizes {sorted(n_obs)}")
    rows = []
    for name, f in fits.items():
        rows.append({"model": name, "n_params": f.n_params, "loglik": f.loglik,
                     "aic": f.aic, "bic": f.bic, "r2": f.r2, "converged": f.converged})
    bics = np.array([r["bic"] for r in rows], dtype=float)
    finite = np.isfinite(bics)
    winner = None
    if finite.any():
        best = np.nanmin(np.where(finite, bics, np.nan))
        at_best = [r["model"] for r, b in zip(rows, bics) if b == best]
        winner = at_best[0] if len(at_best) == 1 else None
    for r in rows:
        r["bic_winner"] = r["model"] == winner
    return ModelComparison(rows, winner)
