"""Command-line interface: ``cusprv rv | fit | simulate | rolling``.

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError, CuspError, DataError, NumericalError
from .estimation import CuspSpec, compare_models, fit_cusp, fit_linear, fit_logistic
from .rolling import RollingPlan, bifurcation_series, rolling_fit
from .rv import (CalendarRules, DailyPanel, daily_panel, filter_calendar, normalize_returns,
                 read_intraday_csv, resample_to_grid)
from .simulation import SimConfig, monte_carlo_study

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fingerprint_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def write_manifest(out: Path, command: str, config: dict, inputs, seed) -> dict:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "command": command,
        "config": config,
        "inputs": fingerprint_inputs(inputs),
        "seed": seed,
        "version": __version__,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _resolve_seed(seed: int | None) -> int:
    return secrets.randbits(32) if seed is None else seed


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _default_workers() -> int:
    return os.cpu_count() or 1


def _load_spec(spec_path, panel: DailyPanel) -> CuspSpec:
    if spec_path is not None:
        return CuspSpec.from_json(spec_path)
    if not panel.covariates:
        raise ConfigError("panel has no covariate columns and no --spec was given")
    return CuspSpec.full(sorted(panel.covariates))


def _attach_covariates(panel: DailyPanel, path) -> DailyPanel:
    if path is None:
        return panel
    try:
        frame = pd.read_csv(path, index_col="date", parse_dates=["date"])
    except (OSError, ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return panel.with_covariates(frame)


@click.group()
@click.version_option(__version__, prog_name="cusprv")
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Stochastic cusp models for realized-volatility-normalized returns."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command("rv")
@click.option("--input", "input_", required=True, type=click.Path(exists=True),
              help="Tick CSV (timestamp,price) or a directory of them.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--calendar", type=click.Path(exists=True, dir_okay=False),
              help="Calendar rules JSON; default keeps every session.")
@click.option("--interval", default=5, show_default=True, type=click.IntRange(1, 60),
              help="Grid spacing in minutes.")
@click.option("--covariates", type=click.Path(exists=True, dir_okay=False),
              help="CSV with a date column, inner-joined onto the panel.")
def cmd_rv(input_, out, calendar, interval, covariates):
    """Build the daily panel (ret, rv, ret_norm) from intraday ticks."""
    rules = CalendarRules.from_json(calendar) if calendar else CalendarRules()
    series = filter_calendar(read_intraday_csv(input_), rules)
    if not len(series):
        raise DataError("no sessions remain after calendar filtering")
    panel = normalize_returns(daily_panel(resample_to_grid(series, interval)))
    panel = _attach_covariates(panel, covariates)
    out = _outdir(out)
    panel.write_csv(out / "panel.csv")
    if panel.dropped:
        pd.DataFrame(panel.dropped, columns=["date", "reason"]).to_csv(
            out / "dropped.csv", index=False, lineterminator="\n")
    write_manifest(out, "rv", {"interval_minutes": interval,
                               "calendar": calendar and json.loads(Path(calendar).read_text()),
                               "n_rows": len(panel), "n_dropped": len(panel.dropped)},
                   [input_, calendar, covariates], None)
    click.echo(f"wrote {len(panel)} rows to {out / 'panel.csv'}")


MODEL_CHOICES = ("cusp", "linear", "logistic", "all")


@main.command("fit")
@click.option("--input", "input_", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Daily panel CSV.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--spec", type=click.Path(exists=True, dir_okay=False),
              help="Model spec JSON; default uses every covariate in both controls.")
@click.option("--model", default="all", show_default=True,
              type=click.Choice(MODEL_CHOICES))
@click.option("--state", default="ret_norm", show_default=True,
              help="Panel column used as the state variable.")
@click.option("--seed", type=int, help="Seed for the jittered optimizer starts.")
def cmd_fit(input_, out, spec, model, state, seed):
    """Fit cusp and/or baseline models to a daily panel."""
    panel = DailyPanel.read_csv(input_, required=("date", state))
    cspec = _load_spec(spec, panel)
    seed = _resolve_seed(seed)
    fits = {}
    if model in ("cusp", "all"):
        fits["cusp"] = fit_cusp(panel, cspec, state=state, seed=seed)
        full = CuspSpec.full(cspec.covariates)
        if model == "all" and full != cspec:
            fits["cusp_unrestricted"] = fit_cusp(panel, full, state=state, seed=seed)
    if model in ("linear", "all"):
        fits["linear"] = fit_linear(panel, cspec, state=state)
    if model in ("logistic", "all"):
        init = fits["cusp"].params[2:] if "cusp" in fits else None
        fits["logistic"] = fit_logistic(panel, cspec, state=state, init_controls=init,
                                        seed=seed)
    out = _outdir(out)
    result = {name: f.as_dict() for name, f in fits.items()}
    if model == "all":
        comparison = compare_models(fits)
        table = comparison.to_frame()
        table.to_csv(out / "comparison.csv", index=False, float_format="%.6f", lineterminator="\n")
        result["winner"] = comparison.winner
        click.echo(table.to_string(float_format=lambda v: f"{v:.3f}"))
        click.echo(f"lowest BIC: {comparison.winner}")
    _dump(out / "fits.json", result)
    write_manifest(out, "fit", {"model": model, "state": state, "spec": cspec.to_dict()},
                   [input_, spec], seed)


@main.command("simulate")
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="Simulation config JSON; omitted keys take their defaults.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, help="Overrides the config seed.")
@click.option("--workers", type=click.IntRange(1), default=None,
              help="Parallel replications [default: CPU count].")
@click.option("--paths/--no-paths", default=True, show_default=True,
              help="Write simulated paths for every replication.")
def cmd_simulate(config, out, seed, workers, paths):
    """Monte Carlo parameter-recovery study."""
    raw = json.loads(Path(config).read_text()) if config else {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{config}: expected a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if raw.get("seed") is None:
        raw["seed"] = _resolve_seed(None)
    cfg = SimConfig.from_dict(raw)
    res = monte_carlo_study(cfg, workers=workers or _default_workers(), keep_paths=paths)
    out = _outdir(out)
    res.summary.to_csv(out / "summary_long.csv", index=False, float_format="%.10g",
                       lineterminator="\n")
    table = res.table()
    table.to_csv(out / "summary.csv", index_label="quantity", lineterminator="\n")
    _dump(out / "summary.json", res.to_json_dict())
    rows = []
    for rep in res.replications:
        for key, fit in rep.fits.items():
            row = {"replication": rep.index, "fit": key, "converged": fit.converged,
                   "loglik": fit.loglik, "aic": fit.aic, "bic": fit.bic, "r2": fit.r2}
            row.update(zip(fit.param_names, map(float, fit.params)))
            rows.append(row)
        for key, msg in rep.errors.items():
            rows.append({"replication": rep.index, "fit": key, "converged": False,
                         "error": msg})
    pd.DataFrame(rows).to_csv(out / "replications.csv", index=False, float_format="%.10g",
                              lineterminator="\n")
    if paths:
        frames = [r.paths.assign(replication=r.index, t=np.arange(len(r.paths)))
                  for r in res.replications]
        pd.concat(frames, ignore_index=True).to_csv(out / "paths.csv", index=False,
                                                    float_format="%.10g", lineterminator="\n")
    write_manifest(out, "simulate", cfg.to_dict(), [config], cfg.seed)
    click.echo(table.to_string())
    for label, o in res.orderings.items():
        click.echo(f"{label}: restricted<logistic<linear in "
                   f"{o['restricted<logistic<linear']}/{o['n']} replications")


@main.command("rolling")
@click.option("--input", "input_", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Daily panel CSV.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--plan", type=click.Path(exists=True, dir_okay=False),
              help="Rolling plan JSON (window_days, step_days, warm_start, spec).")
@click.option("--spec", type=click.Path(exists=True, dir_okay=False),
              help="Model spec JSON, used when the plan carries none.")
@click.option("--state", default="ret_norm", show_default=True)
@click.option("--seed", type=int)
@click.option("--workers", type=click.IntRange(1), default=None,
              help="Parallel windows when warm starts are off [default: CPU count].")
def cmd_rolling(input_, out, plan, spec, state, seed, workers):
    """Rolling-window fits with BIC comparison and bifurcation diagnostics."""
    panel = DailyPanel.read_csv(input_, required=("date", state))
    raw = json.loads(Path(plan).read_text()) if plan else {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{plan}: expected a JSON object")
    cspec = None if "spec" in raw else _load_spec(spec, panel)
    rplan = RollingPlan.from_dict(raw, cspec)
    seed = _resolve_seed(seed)
    res = rolling_fit(panel, rplan, seed=seed, workers=workers or _default_workers(),
                      state=state)
    out = _outdir(out)
    frame = res.to_frame()
    frame.to_csv(out / "rolling.csv", index=False, float_format="%.10g", lineterminator="\n")
    _dump(out / "rolling.json", res.to_json_dict())

    bic = frame[["anchor", "bic_cusp", "bic_logistic", "bic_linear", "cusp_wins",
                 "converged"]]
    bic.to_csv(out / "plot_bic.csv", index=False, float_format="%.10g", lineterminator="\n")
    names = rplan.spec.param_names()
    coef = frame.melt(id_vars="anchor", value_vars=names, var_name="coefficient",
                      value_name="value")
    absz = frame.melt(id_vars="anchor", value_vars=[f"abs_z_{n}" for n in names],
                      value_name="abs_z")["abs_z"]
    coef.assign(abs_z=absz.to_numpy()).to_csv(out / "plot_coefficients.csv", index=False,
                                               float_format="%.10g", lineterminator="\n")
    bifurcation_series(res).to_csv(out / "plot_bifurcation.csv", lineterminator="\n")
    write_manifest(out, "rolling", rplan.to_dict() | {"state": state}, [input_, plan, spec],
                   seed)
    n_conv = int(frame["converged"].sum())
    click.echo(f"{len(frame)} windows ({n_conv} converged); cusp lowest BIC in "
               f"{int(frame['cusp_wins'].sum())}")


def run(argv=None) -> int:
    """Invoke the CLI and map failures onto exit codes."""
    try:
        main.main(args=argv, prog_name="cusprv", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    except CuspError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK


def entry_point():
    sys.exit(run())
