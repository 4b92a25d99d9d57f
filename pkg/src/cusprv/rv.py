"""Realized variance and volatility-normalised daily returns.

Pipeline: intraday ticks -> :func:`filter_calendar` -> :func:`resample_to_grid`
-> :func:`realized_variance` / :func:`daily_panel` -> :func:`normalize_returns`.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

DEFAULT_INTERVAL_MINUTES = 5
PANEL_COLUMNS = ("date", "ret", "rv", "ret_norm")


@dataclass(frozen=True, eq=False)
class Session:
    """One trading session: strictly increasing timestamps and log-prices."""

    date: dt.date
    times: np.ndarray  # datetime64[ns]
    log_prices: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.log_prices):
            raise DataError(f"{self.date}: times and prices differ in length")
        if len(self.times) < 2:
            raise DataError(f"{self.date}: a session needs at least 2 prices")
        if np.any(np.diff(self.times.astype("int64")) <= 0):
            raise DataError(f"{self.date}: timestamps must be strictly increasing")


@dataclass(frozen=True, eq=False)
class IntradaySeries:
    sessions: tuple[Session, ...]
    dropped: tuple[tuple[str, str], ...] = ()  # (date, reason) records

    def __post_init__(self):
        dates = [s.date for s in self.sessions]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise DataError("sessions must be strictly increasing by date")

    def __len__(self):
        return len(self.sessions)

    @property
    def dates(self) -> list[dt.date]:
        return [s.date for s in self.sessions]

    @classmethod
    def from_ticks(cls, timestamps, prices) -> "IntradaySeries":
        """Group ticks by calendar date.

        Duplicate timestamps collapse to the last price seen; sessions left
        with fewer than two ticks are dropped and recorded.
        """
        times = pd.to_datetime(pd.Series(timestamps)).to_numpy(dtype="datetime64[ns]")
        prices = np.asarray(prices, dtype=float)
        if np.any(~np.isfinite(prices)) or np.any(prices <= 0):
            raise DataError("prices must be finite and positive")
        frame = pd.DataFrame({"t": times, "p": prices})
        frame = frame.drop_duplicates("t", keep="last").sort_values("t", kind="stable")
        frame["d"] = frame["t"].dt.date
        sessions, dropped = [], []
        for day, grp in frame.groupby("d", sort=True):
            if len(grp) < 2:
                dropped.append((str(day), "fewer than 2 ticks"))
                continue
            sessions.append(Session(day, grp["t"].to_numpy(), np.log(grp["p"].to_numpy())))
        return cls(tuple(sessions), tuple(dropped))


# ---------------------------------------------------------------------------
# calendar


WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class CalendarRules:
    """Which sessions to keep.

    ``weekday_mask[i]`` is True when weekday ``i`` (Monday = 0) is a trading
    day. ``excluded_dates`` are exact dates; ``excluded_days`` are
    ``(month, day)`` pairs excluded every year. With
    ``us_federal_holidays`` the US federal holiday calendar is excluded too.
    The default instance keeps everything.
    """

    weekday_mask: tuple[bool, ...] = (True,) * 7
    excluded_dates: frozenset = frozenset()
    excluded_days: frozenset = frozenset()
    us_federal_holidays: bool = False

    def __post_init__(self):
        if len(self.weekday_mask) != 7:
            raise ConfigError("weekday_mask needs 7 entries, Monday first")

    @classmethod
    def us_equity(cls) -> "CalendarRules":
        """Weekends, federal holidays, Dec 24-26 and Dec 31-Jan 2 removed."""
        return cls(weekday_mask=(True,) * 5 + (False,) * 2,
                   excluded_days=frozenset({(12, 24), (12, 25), (12, 26),
                                            (12, 31), (1, 1), (1, 2)}),
                   us_federal_holidays=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CalendarRules":
        mask = d.get("weekday_mask", [True] * 7)
        if mask and isinstance(mask[0], str):
            keep = {m.lower()[:3] for m in mask}
            unknown = keep - set(WEEKDAYS)
            if unknown:
                raise ConfigError(f"unknown weekday names {sorted(unknown)}")
            mask = [w in keep for w in WEEKDAYS]
        dates, days = set(), set()
        for item in d.get("excluded_dates", []):
            try:
                if len(item) == 5:  # MM-DD, every year
                    month, day = (int(p) for p in item.split("-"))
                    dt.date(2000, month, day)
                    days.add((month, day))
                else:
                    dates.add(dt.date.fromisoformat(item))
            except ValueError as exc:
                raise ConfigError(f"bad excluded date {item!r}: {exc}") from None
        return cls(tuple(bool(m) for m in mask), frozenset(dates), frozenset(days),
                   bool(d.get("us_federal_holidays", False)))

    @classmethod
    def from_json(cls, path) -> "CalendarRules":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def excludes(self, day: dt.date, holidays=frozenset()) -> str | None:
        """Reason the day is excluded, or None if it is kept."""
        if not self.weekday_mask[day.weekday()]:
            return f"weekday {WEEKDAYS[day.weekday()]}"
        if day in self.excluded_dates or (day.month, day.day) in self.excluded_days:
            return "excluded date"
        if day in holidays:
            return "federal holiday"
        return None


def _federal_holidays(dates):
    if not dates:
        return frozenset()
    from pandas.tseries.holiday import USFederalHolidayCalendar

    hol = USFederalHolidayCalendar().holidays(start=min(dates), end=max(dates))
    return frozenset(d.date() for d in hol)


def filter_calendar(series: IntradaySeries, rules: CalendarRules | None = None) -> IntradaySeries:
    """Remove sessions excluded by ``rules``; drops are appended to ``dropped``."""
    if rules is None:
        return series
    holidays = _federal_holidays(series.dates) if rules.us_federal_holidays else frozenset()
    kept, dropped = [], list(series.dropped)
    for s in series.sessions:
        reason = rules.excludes(s.date, holidays)
        if reason is None:
            kept.append(s)
        else:
            dropped.append((str(s.date), reason))
    if not kept and series.sessions:
        log.warning("calendar rules removed every session")
        dropped.append(("*", "calendar removed every session"))
    return IntradaySeries(tuple(kept), tuple(dropped))


# ---------------------------------------------------------------------------
# gridding and realized variance


def resample_to_grid(series: IntradaySeries, interval_minutes: int = DEFAULT_INTERVAL_MINUTES,
                     *, session_open: dt.time | None = None,
                     session_close: dt.time | None = None) -> IntradaySeries:
    """Sample each session on a regular clock grid with last-tick carry-forward.

    The grid starts at the session open (``session_open`` if given, else the
    first tick floored to the interval) and runs to ``session_close`` (else
    the last tick). Ticks outside the open/close window are ignored; a grid
    point before the first tick takes the first tick. Sessions left with fewer
    than two grid points are dropped and recorded.
    """
    if int(interval_minutes) != interval_minutes or interval_minutes <= 0:
        raise ConfigError(f"interval must be a positive integer, got {interval_minutes}")
    step = np.timedelta64(int(interval_minutes) * 60, "s").astype("timedelta64[ns]")
    out, dropped = [], list(series.dropped)
    for s in series.sessions:
        times, prices = s.times, s.log_prices
        day = np.datetime64(s.date, "ns")
        if session_open is not None:
            start = day + _tod(session_open)
        else:
            start = day + ((times[0] - day) // step) * step
        end = day + _tod(session_close) if session_close is not None else times[-1]
        inside = (times >= start) & (times <= end)
        if not inside.any():
            log.warning("%s: no ticks inside the session window, dropped", s.date)
            dropped.append((str(s.date), "empty session"))
            continue
        times, prices = times[inside], prices[inside]
        n = int((end - start) // step) + 1
        grid = start + np.arange(n) * step
        if n < 2:
            dropped.append((str(s.date), "fewer than 2 grid points"))
            continue
        idx = np.searchsorted(times, grid, side="right") - 1
        idx = np.maximum(idx, 0)
        out.append(Session(s.date, grid, prices[idx]))
    return IntradaySeries(tuple(out), tuple(dropped))


def _tod(t: dt.time) -> np.timedelta64:
    seconds = t.hour * 3600 + t.minute * 60 + t.second
    return np.timedelta64(seconds, "s").astype("timedelta64[ns]")


def realized_variance(gridded: IntradaySeries) -> tuple[np.ndarray, np.ndarray]:
    """Sum of squared intraday log-returns per session.

    Returns ``(dates, rv)`` with dates as ``datetime64[D]``.
    """
    dates, rv = [], []
    for s in gridded.sessions:
        if len(s.log_prices) < 2:
            continue
        r = np.diff(s.log_prices)
        dates.append(np.datetime64(s.date, "D"))
        rv.append(float(r @ r))
    return np.array(dates, dtype="datetime64[D]"), np.array(rv, dtype=float)


# ---------------------------------------------------------------------------
# daily panel


@dataclass(frozen=True, eq=False)
class DailyPanel:
    """Date-indexed daily returns, realized variance, normalised returns, covariates."""

    dates: np.ndarray  # datetime64[D]
    ret: np.ndarray
    rv: np.ndarray
    ret_norm: np.ndarray
    covariates: dict[str, np.ndarray] = field(default_factory=dict)
    dropped: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        n = len(self.dates)
        cols = {"ret": self.ret, "rv": self.rv, "ret_norm": self.ret_norm, **self.covariates}
        for name, col in cols.items():
            if len(col) != n:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {n}")

    def __len__(self):
        return len(self.dates)

    @classmethod
    def from_arrays(cls, state, covariates: dict, *, ret=None, rv=None, dates=None,
                    start="2000-01-03") -> "DailyPanel":
        """Panel from bare arrays; dates default to consecutive business days."""
        state = np.asarray(state, dtype=float)
        n = len(state)
        if dates is None:
            dates = pd.bdate_range(start, periods=n).to_numpy().astype("datetime64[D]")
        if rv is None:
            rv = np.ones(n)
        if ret is None:
            ret = state * np.sqrt(rv)
        return cls(np.asarray(dates, dtype="datetime64[D]"), np.asarray(ret, float),
                   np.asarray(rv, float), state,
                   {k: np.asarray(v, float) for k, v in covariates.items()})

    def column(self, name: str) -> np.ndarray:
        if name in ("ret", "rv", "ret_norm"):
            return getattr(self, name)
        try:
            return self.covariates[name]
        except KeyError:
            raise DataError(f"panel has no column {name!r}") from None

    def covariate_matrix(self, names) -> np.ndarray:
        cols = [self.column(n) for n in names]
        return np.column_stack(cols) if cols else np.empty((len(self), 0))

    def slice(self, start: int, stop: int) -> "DailyPanel":
        sl = slice(start, stop)
        return DailyPanel(self.dates[sl], self.ret[sl], self.rv[sl], self.ret_norm[sl],
                          {k: v[sl] for k, v in self.covariates.items()})

    def shift_dates(self, days: int) -> "DailyPanel":
        return replace(self, dates=self.dates + np.timedelta64(days, "D"))

    def with_covariates(self, frame: pd.DataFrame) -> "DailyPanel":
        """Inner-join covariate columns on date (``frame`` indexed by date)."""
        idx = pd.DatetimeIndex(frame.index).values.astype("datetime64[D]")
        frame = frame.set_axis(idx)
        keep = np.isin(self.dates, idx)
        dropped = [(str(d), "no covariates") for d in self.dates[~keep]]
        base = DailyPanel(self.dates[keep], self.ret[keep], self.rv[keep], self.ret_norm[keep],
                          {k: v[keep] for k, v in self.covariates.items()},
                          self.dropped + tuple(dropped))
        sub = frame.loc[base.dates]
        covs = dict(base.covariates)
        for col in sub.columns:
            covs[str(col)] = sub[col].to_numpy(dtype=float)
        return replace(base, covariates=covs)

    def to_frame(self) -> pd.DataFrame:
        data = {"date": pd.to_datetime(self.dates).strftime("%Y-%m-%d"), "ret": self.ret,
                "rv": self.rv, "ret_norm": self.ret_norm}
        data.update(self.covariates)
        return pd.DataFrame(data)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    @classmethod
    def read_csv(cls, path, required=("date", "ret_norm")) -> "DailyPanel":
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataError(f"{path}: {exc}") from None
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            dates = pd.to_datetime(frame["date"]).to_numpy().astype("datetime64[D]")
        except (ValueError, TypeError) as exc:
            raise DataError(f"{path}: bad date column: {exc}") from None
        state = frame["ret_norm"].to_numpy(float) if "ret_norm" in frame else None
        ret = frame["ret"].to_numpy(float) if "ret" in frame else state
        rv = frame["rv"].to_numpy(float) if "rv" in frame else np.ones(len(frame))
        if state is None:
            state = np.full(len(frame), np.nan)
        covs = {c: frame[c].to_numpy(float) for c in frame.columns
                if c not in PANEL_COLUMNS}
        return cls(dates, ret, rv, state, covs)

    def fingerprint(self, columns) -> dict:
        """n_obs, date range and a hash of the given columns."""
        h = hashlib.sha256()
        for name in columns:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.column(name), dtype="<f8").tobytes())
        return {"n_obs": len(self),
                "date_start": str(self.dates[0]) if len(self) else None,
                "date_end": str(self.dates[-1]) if len(self) else None,
                "columns": list(columns), "sha256": h.hexdigest()}


def daily_panel(gridded: IntradaySeries) -> DailyPanel:
    """Close-to-close daily returns with the session's realized variance.

    The first session has no previous close, so its return runs from its own
    open. ``ret_norm`` is left as NaN.
    """
    dates, rv = realized_variance(gridded)
    if not len(dates):
        raise DataError("no sessions to form daily returns")
    closes = np.array([s.log_prices[-1] for s in gridded.sessions])
    ret = np.diff(closes, prepend=gridded.sessions[0].log_prices[0])
    return DailyPanel(dates, ret, rv, np.full(len(ret), np.nan), {}, gridded.dropped)


def normalize_returns(panel: DailyPanel) -> DailyPanel:
    """Fill ``ret_norm = ret / sqrt(rv)``; rows with ``rv == 0`` are removed."""
    if np.any(panel.rv < 0) or np.any(~np.isfinite(panel.rv)):
        raise DataError("realized variance must be finite and non-negative")
    keep = panel.rv > 0
    dropped = [(str(d), "zero realized variance") for d in panel.dates[~keep]]
    for d, _ in dropped:
        log.info("%s: zero realized variance, row removed", d)
    if not keep.any():
        raise DataError("no usable observations")
    rv = panel.rv[keep]
    ret = panel.ret[keep]
    return DailyPanel(panel.dates[keep], ret, rv, ret / np.sqrt(rv),
                      {k: v[keep] for k, v in panel.covariates.items()},
                      panel.dropped + tuple(dropped))


# ---------------------------------------------------------------------------
# file input


def read_intraday_csv(path) -> IntradaySeries:
    """Read ``timestamp,price`` ticks from a CSV file or a directory of them."""
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"{path}: no CSV files found")
    stamps, prices = [], []
    for f in files:
        s, p = _read_ticks(f)
        stamps.extend(s)
        prices.extend(p)
    if not stamps:
        raise DataError(f"{path}: no ticks")
    return IntradaySeries.from_ticks(np.array(stamps, dtype="datetime64[ns]"), prices)


def _read_ticks(path: Path):
    stamps, prices = [], []
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return stamps, prices
        header = [h.strip().lower() for h in header]
        try:
            it, ip = header.index("timestamp"), header.index("price")
        except ValueError:
            raise DataError(f"{path}: header must contain 'timestamp' and 'price'", 1) from None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ts = dt.datetime.fromisoformat(row[it].strip())
                price = float(row[ip])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: malformed row ({exc})", lineno) from None
            if not math.isfinite(price) or price <= 0:
                raise DataError(f"{path}: price must be positive, got {row[ip]!r}", lineno)
            if ts.tzinfo is not None:
                ts = ts.replace(tzinfo=None)
            stamps.append(np.datetime64(ts, "ns"))
            prices.append(price)
    return stamps, prices
