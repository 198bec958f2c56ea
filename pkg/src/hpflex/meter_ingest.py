"""Meter and temperature ingestion.

Meter CSV: ``timestamp_utc,energy_kwh`` with one cumulative register read
per slot. Temperature CSV: ``timestamp_utc,temp_c``. Missing slots are kept
as explicit gaps (NaN) and never interpolated, since interpolated energy
would fabricate switching edges.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import CoverageError, GapError, MonotonicityError, ParseError

METER_HEADER = ("timestamp_utc", "energy_kwh")
TEMPERATURE_HEADER = ("timestamp_utc", "temp_c")
THETA_BOUNDS = (-60.0, 60.0)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ParseError(f"bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, eq=False)
class _Grid:
    t0: datetime
    step_s: float

    @property
    def step_h(self) -> float:
        return self.step_s / 3600.0

    def time_at(self, hours: float) -> datetime:
        """Absolute timestamp ``hours`` after the series start."""
        return self.t0 + timedelta(hours=float(hours))

    def hours_since_start(self, ts: datetime) -> float:
        return (ts - self.t0).total_seconds() / 3600.0


@dataclass(frozen=True, eq=False)
class MeterSeries(_Grid):
    building_id: str = ""
    e: np.ndarray = field(default_factory=lambda: _frozen([]))
    gaps: tuple[int, ...] = ()
    net: bool = False  # import-minus-export register, may decrease

    def __post_init__(self):
        object.__setattr__(self, "e", _frozen(self.e))
        if self.step_s <= 0:
            raise ValueError("step_s must be positive")
        if len(self.e) < 3:
            raise ParseError("a meter series needs at least 3 readings")
        valid = self.e[~np.isnan(self.e)]
        if not self.net and np.any(np.diff(valid) < 0):
            raise MonotonicityError(f"{self.building_id}: cumulative register decreases")

    def __len__(self):
        return len(self.e)


@dataclass(frozen=True, eq=False)
class PowerSeries(_Grid):
    """Interval-average power in kW; NaN marks masked intervals."""

    p: np.ndarray = field(default_factory=lambda: _frozen([]))
    net_negative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen(self.p))

    def __len__(self):
        return len(self.p)

    def masked_intervals(self) -> list[tuple[float, float]]:
        """(start_h, end_h) spans of consecutive masked intervals."""
        bad = np.isnan(self.p)
        out = []
        k = 0
        n = len(bad)
        while k < n:
            if bad[k]:
                j = k
                while j < n and bad[j]:
                    j += 1
                out.append((k * self.step_h, j * self.step_h))
                k = j
            else:
                k += 1
        return out


@dataclass(frozen=True, eq=False)
class TemperatureSeries(_Grid):
    """Piecewise-constant outdoor temperature: theta[k] holds on slot k."""

    theta: np.ndarray = field(default_factory=lambda: _frozen([]))

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(self.theta))
        lo, hi = THETA_BOUNDS
        bad = (self.theta < lo) | (self.theta > hi) | np.isnan(self.theta)
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise ParseError(f"temperature {self.theta[k]} at slot {k} outside [{lo}, {hi}] C")

    def __len__(self):
        return len(self.theta)

    @property
    def duration_h(self) -> float:
        return len(self.theta) * self.step_h

    def _cumulative(self, offset_h: float = 0.0):
        edges = offset_h + self.step_h * np.arange(len(self.theta) + 1)
        cum = np.concatenate(([0.0], np.cumsum(self.theta * self.step_h)))
        return edges, cum

    def mean_between(self, a, b, origin: datetime | None = None):
        """Time-weighted mean over [a, b] hours (vectorized).

        Times are relative to ``origin`` (defaults to the series start).
        """
        offset = 0.0 if origin is None else (self.t0 - origin).total_seconds() / 3600.0
        edges, cum = self._cumulative(offset)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        eps = 1e-9
        if np.any(a < edges[0] - eps) or np.any(b > edges[-1] + eps):
            raise CoverageError("requested interval not covered by temperature series")
        ia = np.interp(a, edges, cum)
        ib = np.interp(b, edges, cum)
        width = b - a
        with np.errstate(invalid="ignore", divide="ignore"):
            point = np.interp(a, edges[:-1], self.theta)
            return np.where(width > 0, (ib - ia) / np.where(width > 0, width, 1.0), point)

    def value_at(self, hours, origin: datetime | None = None):
        """Temperature of the slot containing each time (hours from origin)."""
        offset = 0.0 if origin is None else (self.t0 - origin).total_seconds() / 3600.0
        k = np.floor((np.asarray(hours, dtype=float) - offset) / self.step_h + 1e-9).astype(int)
        if np.any(k < 0) or np.any(k >= len(self.theta)):
            raise CoverageError("time outside temperature series")
        return self.theta[k]


def _read_rows(path: Path, header: tuple[str, str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if tuple(h.strip() for h in got) != header:
            raise ParseError(f"{path}: header {got} != {list(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            ts = parse_timestamp(row[0])
            raw = row[1].strip()
            if raw == "":
                value = math.nan
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad number {raw!r}") from None
            yield lineno, ts, value


def _regularize(path, rows, step_s):
    """Place readings on a regular grid; missing slots become NaN."""
    t0 = rows[0][1]
    n_slots = 0
    slots = {}
    for lineno, ts, value in rows:
        offset = (ts - t0).total_seconds() / step_s
        k = round(offset)
        if abs(offset - k) > 1e-6 or k < 0:
            raise ParseError(f"{path}:{lineno}: timestamp {ts} not on the {step_s:g} s grid")
        if k in slots:
            raise ParseError(f"{path}:{lineno}: duplicate timestamp {ts}")
        slots[k] = value
        n_slots = max(n_slots, k + 1)
    values = np.full(n_slots, np.nan)
    for k, v in slots.items():
        values[k] = v
    return t0, values


def load_meter_csv(path, building_id: str | None = None, step_s: float = 300.0,
                   max_gap_fraction: float = 0.05, allow_net: bool = False) -> MeterSeries:
    """Read a cumulative-energy CSV into a validated MeterSeries.

    With ``allow_net`` the register may decrease (net import/export meters);
    the resulting negative intervals are masked by :func:`power_from_energy`.
    """
    path = Path(path)
    rows = list(_read_rows(path, METER_HEADER))
    if len(rows) < 3:
        raise ParseError(f"{path}: need at least 3 readings")
    t0, e = _regularize(path, rows, step_s)
    gaps = tuple(int(k) for k in np.flatnonzero(np.isnan(e)))
    if len(gaps) > max_gap_fraction * len(e):
        raise GapError(f"{path}: {len(gaps)} of {len(e)} readings missing")
    bid = building_id if building_id is not None else path.stem
    return MeterSeries(t0=t0, step_s=float(step_s), building_id=bid, e=e, gaps=gaps, net=allow_net)


def load_temperature_csv(path, step_s: float | None = None) -> TemperatureSeries:
    path = Path(path)
    rows = list(_read_rows(path, TEMPERATURE_HEADER))
    if len(rows) < 2:
        raise ParseError(f"{path}: need at least 2 readings")
    if step_s is None:
        step_s = min((b[1] - a[1]).total_seconds() for a, b in zip(rows, rows[1:]))
        if step_s <= 0:
            raise ParseError(f"{path}: timestamps not strictly increasing")
    t0, theta = _regularize(path, rows, step_s)
    if np.any(np.isnan(theta)):
        raise GapError(f"{path}: temperature series has missing slots")
    return TemperatureSeries(t0=t0, step_s=float(step_s), theta=theta)


def write_meter_csv(path, m: MeterSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METER_HEADER)
        for k, e in enumerate(m.e):
            if np.isnan(e):
                continue
            w.writerow([format_timestamp(m.t0 + timedelta(seconds=k * m.step_s)), f"{e:.6f}"])


def write_temperature_csv(path, t: TemperatureSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TEMPERATURE_HEADER)
        for k, th in enumerate(t.theta):
            w.writerow([format_timestamp(t.t0 + timedelta(seconds=k * t.step_s)), f"{th:.4f}"])


def power_from_energy(m: MeterSeries) -> PowerSeries:
    """Difference the register: p_k = (e_{k+1} - e_k) / t_s in kW.

    Pairs touching a gap are masked. Negative intervals (net meters with
    local generation) are masked too and flag the series.
    """
    p = np.diff(m.e) / (m.step_s / 3600.0)
    negative = p < 0
    net_negative = bool(np.any(negative))
    p = np.where(negative, np.nan, p)
    return PowerSeries(t0=m.t0, step_s=m.step_s, p=p, net_negative=net_negative)


def align_temperature(t: TemperatureSeries, grid: _Grid, n: int | None = None) -> TemperatureSeries:
    """Resample ``t`` onto ``grid`` by time-weighted averaging.

    ``n`` is the number of grid slots; it defaults to ``len(grid)``.
    """
    if n is None:
        n = len(grid)
    g = grid.step_h
    offset = (t.t0 - grid.t0).total_seconds() / 3600.0
    edges, cum = t._cumulative(offset)
    g_edges = g * np.arange(n + 1)
    eps = 1e-9
    if edges[0] > g_edges[0] + eps or edges[-1] < g_edges[-1] - eps:
        raise CoverageError(
            f"temperature spans [{edges[0]:.3f}, {edges[-1]:.3f}] h, grid needs [0, {g_edges[-1]:.3f}] h")
    c = np.interp(g_edges, edges, cum)
    return TemperatureSeries(t0=grid.t0, step_s=grid.step_s, theta=np.diff(c) / g)
