"""Rolling-window estimation with BIC comparison and bimodality diagnostics."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, CuspError, DataError
from .estimation import CuspFit, CuspSpec, fit_cusp, fit_linear, fit_logistic
from .rv import DailyPanel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RollingPlan:
    """Window and step lengths in panel rows (trading days)."""

    spec: CuspSpec
    window_days: int = 126
    step_days: int = 21
    warm_start: bool = True
    n_starts: int = 5

    def __post_init__(self):
        if self.window_days < 60:
            raise ConfigError("window_days must be at least 60")
        if self.step_days < 1:
            raise ConfigError("step_days must be at least 1")
        if self.window_days <= self.step_days:
            raise ConfigError("window_days must exceed step_days")

    @classmethod
    def from_dict(cls, d: Mapping, spec: CuspSpec | None = None) -> "RollingPlan":
        if "spec" in d:
            spec = CuspSpec.from_dict(d["spec"])
        if spec is None:
            raise ConfigError("rolling plan needs a spec")
        extra = set(d) - {"spec", "window_days", "step_days", "warm_start", "n_starts"}
        if extra:
            raise ConfigError(f"unknown plan keys {sorted(extra)}")
        return cls(spec, int(d.get("window_days", 126)), int(d.get("step_days", 21)),
                   bool(d.get("warm_start", True)), int(d.get("n_starts", 5)))

    @classmethod
    def from_json(cls, path, spec: CuspSpec | None = None) -> "RollingPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()), spec)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "window_days": self.window_days,
                "step_days": self.step_days, "warm_start": self.warm_start,
                "n_starts": self.n_starts}

    def starts(self, n: int) -> list[int]:
        if n < self.window_days:
            raise DataError(f"panel has {n} rows, shorter than one window of {self.window_days}")
        return list(range(0, n - self.window_days + 1, self.step_days))


@dataclass
class WindowFit:
    index: int
    start: int  # first panel row
    anchor: np.datetime64  # last date in the window
    n_obs: int
    n_dropped: int
    cusp: CuspFit | None
    linear: object | None
    logistic: object | None
    bimodal_fraction: float
    errors: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.cusp is not None and self.cusp.converged

    @property
    def cusp_wins(self) -> bool:
        """Cusp has the lowest BIC of the three models."""
        if self.cusp is None:
            return False
        others = [f.bic for f in (self.linear, self.logistic) if f is not None]
        return bool(np.isfinite(self.cusp.bic) and all(self.cusp.bic < b for b in others))


@dataclass
class RollingResult:
    plan: RollingPlan
    windows: list[WindowFit]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        names = self.plan.spec.param_names()
        for w in self.windows:
            row = {"anchor": str(w.anchor), "start_row": w.start, "n_obs": w.n_obs,
                   "n_dropped": w.n_dropped}
            for i, name in enumerate(names):
                row[name] = w.cusp.params[i] if w.cusp is not None else np.nan
                row[f"abs_z_{name}"] = abs(w.cusp.z[i]) if w.cusp is not None else np.nan
            for label, f in (("cusp", w.cusp), ("linear", w.linear), ("logistic", w.logistic)):
                for stat in ("loglik", "aic", "bic"):
                    row[f"{stat}_{label}"] = getattr(f, stat) if f is not None else np.nan
            row["pseudo_r2"] = w.cusp.pseudo_r2 if w.cusp is not None else np.nan
            row["bimodal_fraction"] = w.bimodal_fraction
            row["converged"] = w.converged
            row["cusp_wins"] = w.cusp_wins
            rows.append(row)
        return pd.DataFrame(rows)

    def to_json_dict(self) -> dict:
        return {"plan": self.plan.to_dict(),
                "windows": [{"index": w.index, "anchor": str(w.anchor), "start_row": w.start,
                             "n_obs": w.n_obs, "n_dropped": w.n_dropped,
                             "bimodal_fraction": w.bimodal_fraction,
                             "converged": w.converged, "cusp_wins": w.cusp_wins,
                             "cusp": w.cusp.as_dict() if w.cusp else None,
                             "linear": w.linear.as_dict() if w.linear else None,
                             "logistic": w.logistic.as_dict() if w.logistic else None,
                             "errors": w.errors}
                            for w in self.windows]}


def window_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def bimodal_fraction(fit: CuspFit, panel: DailyPanel) -> float:
    """Share of observations whose fitted controls have a negative Cardan discriminant."""
    xa, xb = fit.spec.designs(panel)
    ka = fit.spec.n_alpha
    alpha = xa @ fit.params[2:2 + ka]
    beta = xb @ fit.params[2 + ka:]
    delta = 0.25 * alpha**2 - beta**3 / 27.0
    return float(np.mean(delta < 0.0))


def _clean(panel: DailyPanel, columns) -> tuple[DailyPanel, int]:
    ok = np.ones(len(panel), dtype=bool)
    for c in columns:
        ok &= np.isfinite(panel.column(c))
    if ok.all():
        return panel, 0
    idx = np.flatnonzero(ok)
    sub = DailyPanel(panel.dates[idx], panel.ret[idx], panel.rv[idx], panel.ret_norm[idx],
                     {k: v[idx] for k, v in panel.covariates.items()})
    return sub, int((~ok).sum())


def fit_window(panel: DailyPanel, plan: RollingPlan, index: int, start: int, seed: int,
               init=None, state: str = "ret_norm") -> WindowFit:
    """Fit every model on one window; failures are recorded, never raised."""
    raw = panel.slice(start, start + plan.window_days)
    sub, n_dropped = _clean(raw, [state, *plan.spec.covariates])
    anchor = raw.dates[-1]
    wseed = window_seed(seed, index)
    errors, cusp, linear, logistic = {}, None, None, None
    frac = float("nan")
    try:
        cusp = fit_cusp(sub, plan.spec, init, state=state, seed=wseed, n_starts=plan.n_starts)
        frac = bimodal_fraction(cusp, sub)
    except CuspError as exc:
        errors["cusp"] = str(exc)
    try:
        linear = fit_linear(sub, plan.spec, state=state)
    except CuspError as exc:
        errors["linear"] = str(exc)
    try:
        init_controls = cusp.params[2:] if cusp is not None else None
        logistic = fit_logistic(sub, plan.spec, state=state, init_controls=init_controls,
                                seed=wseed, n_starts=plan.n_starts)
    except CuspError as exc:
        errors["logistic"] = str(exc)
    if cusp is None or not cusp.converged:
        log.info("window %d (%s): cusp fit did not converge", index, anchor)
    return WindowFit(index, start, anchor, len(sub), n_dropped, cusp, linear, logistic,
                     frac, errors)


def _fit_window(args):
    return fit_window(*args)


def rolling_fit(panel: DailyPanel, plan: RollingPlan, *, seed: int = 0, workers: int = 1,
                state: str = "ret_norm") -> RollingResult:
    """Fit cusp, linear and logistic models on each rolling window.

    With ``plan.warm_start`` each window's first cusp start is the previous
    window's optimum (when that fit converged), so windows run in order;
    otherwise they are independent and may run on ``workers`` processes.
    """
    starts = plan.starts(len(panel))
    if plan.warm_start:
        windows, init = [], None
        for i, s in enumerate(starts):
            w = fit_window(panel, plan, i, s, seed, init, state)
            windows.append(w)
            init = w.cusp.params if w.converged else None
    else:
        jobs = [(panel, plan, i, s, seed, None, state) for i, s in enumerate(starts)]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
                windows = list(pool.map(_fit_window, jobs))
        else:
            windows = [_fit_window(j) for j in jobs]
    windows.sort(key=lambda w: w.index)
    return RollingResult(plan, windows)


def bifurcation_series(result: RollingResult) -> pd.Series:
    """Per-window share of observations inside the bifurcation set."""
    if not result.windows:
        raise DataError("rolling result has no windows")
    return pd.Series([w.bimodal_fraction for w in result.windows],
                     index=pd.Index([str(w.anchor) for w in result.windows], name="anchor"),
                     name="bimodal_fraction")
