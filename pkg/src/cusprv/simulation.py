"""Monte Carlo study of the cusp model under square-root stochastic volatility.

Each replication simulates, on a unit time grid with ``substeps`` Euler steps
per observation,

* the variance ``v``:  ``dv = kappa (omega - v) dt + gamma sqrt(v) dW1``
  (full truncation at zero),
* the cusp state: ``dy = s (alpha_t + beta_t y - y**3) dt + sqrt(2 s) dW2``
  where ``s = time_scale`` speeds the state relative to the covariates,
* returns ``r_t = sigma_t * y_t`` with ``sigma_t`` taken at the start of the
  observation interval,

then fits the cusp (unrestricted and restricted), linear and logistic
models to both the volatility-free state and the raw returns.

With noise ``sqrt(2 s)`` the stationary density of ``y`` for frozen controls is
exactly ``psi * exp(-y**4/4 + beta y**2/2 + alpha y)``, the density the
likelihood uses.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, CuspError, NumericalError
from .estimation import CuspSpec, fit_cusp, fit_linear, fit_logistic
from .rv import DailyPanel

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
STATES = {"y": "ret_norm", "r": "ret"}
MODELS = ("cusp_unrestricted", "cusp_restricted", "linear", "logistic")
TABLE_ROWS = ("alpha_0", "alpha_x1", "alpha_x2", "beta_0", "beta_x1", "beta_x2",
              "omega0", "omega1", "r2", "loglik", "aic", "bic")


@dataclass(frozen=True)
class SimConfig:
    kappa: float = 5.0
    omega: float = 0.04
    gamma: float = 0.5
    alpha: tuple[float, ...] = (-2.0, 3.0, 0.0)  # alpha_0, alpha_1, alpha_2
    beta: tuple[float, ...] = (-1.0, 0.0, 4.0)  # beta_0, beta_1, beta_2
    T: int = 1000
    substeps: int = 1000
    time_scale: float = 10.0
    n_reps: int = 100
    seed: int | None = 0
    burn_in: int = 10
    normalization: str = "sigma"  # y = r/sigma; "sqrt_sigma": y = r/sqrt(sigma)
    n_starts: int = 5

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if 2.0 * self.kappa * self.omega < self.gamma**2:
            raise ConfigError(
                f"Feller condition violated: 2*kappa*omega = {2 * self.kappa * self.omega:g} "
                f"< gamma^2 = {self.gamma**2:g}")
        if self.kappa <= 0 or self.omega <= 0 or self.gamma < 0:
            raise ConfigError("kappa and omega must be positive, gamma non-negative")
        if len(self.alpha) != len(self.beta) or len(self.alpha) < 2:
            raise ConfigError("alpha and beta need an intercept and one entry per covariate")
        if self.T < 100:
            raise ConfigError("T must be at least 100")
        if self.substeps < 10:
            raise ConfigError("substeps must be at least 10")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be at least 1")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be positive")
        if self.normalization not in ("sigma", "sqrt_sigma"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be non-negative")

    @property
    def n_covariates(self) -> int:
        return len(self.alpha) - 1

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(f"x{i + 1}" for i in range(self.n_covariates))

    def specs(self) -> dict[str, CuspSpec]:
        """Unrestricted CuspSpec and one restricted to the non-zero true coefficients."""
        names = self.covariate_names
        restricted = CuspSpec(names, tuple(a != 0 for a in self.alpha[1:]),
                              tuple(b != 0 for b in self.beta[1:]))
        return {"cusp_unrestricted": CuspSpec.full(names), "cusp_restricted": restricted}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"], d["beta"] = list(self.alpha), list(self.beta)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# paths


def simulate_volatility(cfg: SimConfig, rng: np.random.Generator, n: int | None = None,
                        v0: float | None = None) -> np.ndarray:
    """Variance at the start of each of ``n`` unit intervals (default ``cfg.T``)."""
    n = cfg.T if n is None else n
    dt = 1.0 / cfg.substeps
    sq = math.sqrt(dt)
    kappa, omega, gamma = cfg.kappa, cfg.omega, cfg.gamma
    v = cfg.omega if v0 is None else v0
    out = np.empty(n)
    for t in range(n):
        out[t] = v
        z = rng.standard_normal(cfg.substeps)
        for k in range(cfg.substeps):
            vp = v if v > 0.0 else 0.0
            v = v + kappa * (omega - vp) * dt + gamma * math.sqrt(vp) * sq * z[k]
    return np.maximum(out, VAR_FLOOR)


def simulate_cusp_path(cfg: SimConfig, covariates: np.ndarray, rng: np.random.Generator | None,
                       *, noise: bool = True, y0: float = 0.0) -> np.ndarray:
    """Cusp state recorded at the end of each unit interval.

    ``covariates`` has one row per observation and is held fixed within the
    interval. With ``noise=False`` the deterministic gradient flow is
    integrated (``rng`` may then be None).
    """
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    if x.shape[1] != cfg.n_covariates:
        raise ConfigError(f"expected {cfg.n_covariates} covariate columns, got {x.shape[1]}")
    alpha = cfg.alpha[0] + x @ np.array(cfg.alpha[1:])
    beta = cfg.beta[0] + x @ np.array(cfg.beta[1:])
    dt = cfg.time_scale / cfg.substeps
    scale = math.sqrt(2.0 * dt)
    y = float(y0)
    out = np.empty(len(x))
    with np.errstate(over="ignore", invalid="ignore"):
        _euler_cusp(alpha, beta, y, out, cfg.substeps, dt, scale, rng, noise)
    return out


def _euler_cusp(alpha, beta, y, out, substeps, dt, scale, rng, noise):
    for t in range(len(out)):
        a, b = float(alpha[t]), float(beta[t])
        if noise:
            z = rng.standard_normal(substeps) * scale
            for k in range(substeps):
                y = y + (a + b * y - y * y * y) * dt + z[k]
        else:
            for k in range(substeps):
                y = y + (a + b * y - y * y * y) * dt
        if not math.isfinite(y):
            raise NumericalError(f"cusp path diverged at observation {t}; reduce the step "
                                 "(more substeps or a smaller time_scale)")
        out[t] = y


def uniform_covariates(rng, n, k):
    return rng.uniform(0.0, 1.0, size=(n, k))


def simulate_covariates(cfg: SimConfig, rng: np.random.Generator, n: int | None = None,
                        draw: Callable = uniform_covariates) -> np.ndarray:
    """Independent covariate draws, one row per observation (default U[0, 1])."""
    n = cfg.T if n is None else n
    return np.asarray(draw(rng, n, cfg.n_covariates), dtype=float)


@dataclass(eq=False)
class SimulatedPanel:
    x: np.ndarray
    sigma2: np.ndarray
    y: np.ndarray  # latent cusp state
    r: np.ndarray  # sigma * y
    y_obs: np.ndarray  # r normalised per cfg.normalization

    def panel(self, names) -> DailyPanel:
        covs = {name: self.x[:, i] for i, name in enumerate(names)}
        return DailyPanel.from_arrays(self.y_obs, covs, ret=self.r, rv=self.sigma2)

    def to_frame(self, names) -> pd.DataFrame:
        d = {"y": self.y, "sigma2": self.sigma2, "r": self.r, "y_obs": self.y_obs}
        d.update({name: self.x[:, i] for i, name in enumerate(names)})
        return pd.DataFrame(d)


def simulate_replication(cfg: SimConfig, rng: np.random.Generator) -> SimulatedPanel:
    n = cfg.T + cfg.burn_in
    x = simulate_covariates(cfg, rng, n)
    sigma2 = simulate_volatility(cfg, rng, n)
    y = simulate_cusp_path(cfg, x, rng)
    x, sigma2, y = x[cfg.burn_in:], sigma2[cfg.burn_in:], y[cfg.burn_in:]
    sigma = np.sqrt(sigma2)
    r = sigma * y
    y_obs = r / sigma if cfg.normalization == "sigma" else r / np.sqrt(sigma)
    return SimulatedPanel(x, sigma2, y, r, y_obs)


# ---------------------------------------------------------------------------
# study


@dataclass
class Replication:
    index: int
    fits: dict  # "y:cusp_restricted" -> fit record
    errors: dict = field(default_factory=dict)
    paths: pd.DataFrame | None = None


def _fit_all(panel, specs, seed, n_starts):
    fits, errors = {}, {}
    restricted = specs.get("cusp_restricted", next(iter(specs.values())))
    for label, state in STATES.items():
        for name, spec in specs.items():
            try:
                fits[f"{label}:{name}"] = fit_cusp(panel, spec, state=state, seed=seed,
                                                   n_starts=n_starts)
            except CuspError as exc:
                errors[f"{label}:{name}"] = str(exc)
        fits[f"{label}:linear"] = fit_linear(panel, specs_all(specs),
                                             state=state)
        key = f"{label}:cusp_restricted"
        init = fits[key].params[2:] if key in fits else None
        fits[f"{label}:logistic"] = fit_logistic(panel, restricted, state=state,
                                                 init_controls=init, seed=seed,
                                                 n_starts=n_starts)
    return fits, errors


def specs_all(specs) -> CuspSpec:
    """Spec holding every covariate used by any of ``specs``."""
    names = []
    for s in specs.values():
        names.extend(c for c in s.covariates if c not in names)
    return CuspSpec.full(names)


def run_replication(cfg: SimConfig, index: int, specs=None, keep_paths=False) -> Replication:
    seq = np.random.SeedSequence(cfg.seed).spawn(cfg.n_reps)[index]
    rng = np.random.default_rng(seq)
    sim = simulate_replication(cfg, rng)
    specs = cfg.specs() if specs is None else specs
    fit_seed = int(seq.generate_state(1)[0])
    fits, errors = _fit_all(sim.panel(cfg.covariate_names), specs, fit_seed, cfg.n_starts)
    paths = sim.to_frame(cfg.covariate_names) if keep_paths else None
    return Replication(index, fits, errors, paths)


def _run(args):
    return run_replication(*args)


@dataclass
class SimOutput:
    config: SimConfig
    replications: list[Replication]
    summary: pd.DataFrame  # one row per (group, quantity)
    orderings: dict

    def table(self) -> pd.DataFrame:
        """Summary in a quantities x groups layout with ``mean (sd)`` cells."""
        groups = list(dict.fromkeys(self.summary["group"]))
        out = pd.DataFrame(index=list(TABLE_ROWS), columns=groups, dtype=object)
        for row in self.summary.itertuples():
            if row.quantity not in out.index:
                continue
            cell = f"{row.mean:.3f}"
            if np.isfinite(row.sd):
                cell += f" ({row.sd:.3f})"
            out.loc[row.quantity, row.group] = cell
        return out.fillna("")

    def to_json_dict(self) -> dict:
        groups = {}
        for g, sub in self.summary.groupby("group", sort=False):
            groups[g] = {
                "n_used": int(sub["n"].iloc[0]), "n_failed": int(sub["n_failed"].iloc[0]),
                "mean": {q: _num(m) for q, m in zip(sub["quantity"], sub["mean"])},
                "sd": {q: _num(s) for q, s in zip(sub["quantity"], sub["sd"])},
            }
        return {"config": self.config.to_dict(), "n_reps": len(self.replications),
                "groups": groups, "orderings": self.orderings}


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _quantities(fit) -> dict:
    q = dict(zip(fit.param_names, map(float, fit.params)))
    q.update(r2=fit.r2, loglik=fit.loglik, aic=fit.aic, bic=fit.bic)
    return q


def summarize(replications: list[Replication]) -> tuple[pd.DataFrame, dict]:
    """Means and standard deviations per group over usable replications.

    A replication is excluded from a group's statistics when that fit failed
    or did not converge; the counts are kept in ``n`` and ``n_failed``.
    """
    reps = sorted(replications, key=lambda r: r.index)
    groups = list(dict.fromkeys(k for r in reps for k in (*r.fits, *r.errors)))
    rows = []
    for g in groups:
        good = [r.fits[g] for r in reps if g in r.fits and r.fits[g].converged]
        failed = len(reps) - len(good)
        values = pd.DataFrame([_quantities(f) for f in good])
        if values.empty:
            rows.append({"group": g, "quantity": "loglik", "mean": float("nan"),
                         "sd": float("nan"), "n": 0, "n_failed": failed})
            continue
        for q in values.columns:
            col = values[q].to_numpy(float)
            sd = float(np.std(col, ddof=1)) if len(col) > 1 else float("nan")
            rows.append({"group": g, "quantity": q, "mean": float(np.mean(col)), "sd": sd,
                         "n": len(good), "n_failed": failed})
    summary = pd.DataFrame(rows, columns=["group", "quantity", "mean", "sd", "n", "n_failed"])

    orderings = {}
    for label in STATES:
        keys = [f"{label}:cusp_restricted", f"{label}:logistic", f"{label}:linear"]
        ok = [r for r in reps if all(k in r.fits for k in keys)]
        hits = sum(r.fits[keys[0]].bic < r.fits[keys[1]].bic < r.fits[keys[2]].bic for r in ok)
        cusp_best = sum(r.fits[keys[0]].bic < min(r.fits[keys[1]].bic, r.fits[keys[2]].bic)
                        for r in ok)
        orderings[label] = {"n": len(ok), "restricted<logistic<linear": hits,
                            "restricted_best": cusp_best}
    return summary, orderings


def monte_carlo_study(cfg: SimConfig, specs: Mapping[str, CuspSpec] | None = None, *,
                      workers: int = 1, keep_paths: bool = False) -> SimOutput:
    """Run ``cfg.n_reps`` independent replications and tabulate the fits.

    Every replication owns a child of ``SeedSequence(cfg.seed)``, so results
    do not depend on ``workers``.
    """
    specs = dict(cfg.specs() if specs is None else specs)
    jobs = [(cfg, i, specs, keep_paths) for i in range(cfg.n_reps)]
    if workers > 1 and cfg.n_reps > 1:
        with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
            reps = list(pool.map(_run, jobs))
    else:
        reps = [_run(j) for j in jobs]
    summary, orderings = summarize(reps)
    return SimOutput(cfg, reps, summary, orderings)
