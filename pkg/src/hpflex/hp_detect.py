"""Heat-pump switching detection from whole-building 5-min power.

Times inside this module are float hours relative to the start of the
power series; index ``k`` refers to interval ``[k t_s, (k+1) t_s)``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from datetime import timedelta

import numpy as np

from .errors import DegenerateClusterError, EmptySetError, LengthError, UndefinedEdge
from .meter_ingest import PowerSeries, TemperatureSeries, format_timestamp

DEFAULT_MIN_ON_H = 0.25
DEFAULT_MIN_OFF_H = 0.25
MIN_EDGE_KW = 0.1  # smaller on/off centroids are rounding or quantization noise


class Switch(str, enum.Enum):
    ON = "on"
    OFF = "off"

    @property
    def opposite(self) -> "Switch":
        return Switch.OFF if self is Switch.ON else Switch.ON


@dataclass(frozen=True, eq=False)
class Delta2Series:
    """Two-step differences, index-aligned with the power series.

    ``values[k] = p[k] - p[k-2]``; entries 0 and 1 are NaN.
    """

    values: np.ndarray
    extrema_idx: np.ndarray


@dataclass(frozen=True)
class SwitchThresholds:
    """Detection thresholds on the two-step difference.

    ``recover_on``/``recover_off`` are the k-means cluster boundaries; an
    extremum beyond them may be inserted as a missed edge when the
    alternation rule would otherwise drop a whole cycle. None disables
    recovery.
    """

    delta2_on: float
    delta2_off: float
    recover_on: float | None = None
    recover_off: float | None = None

    def __post_init__(self):
        if not self.delta2_on > 0 > self.delta2_off:
            raise ValueError(f"need delta2_on > 0 > delta2_off, got {self}")


@dataclass(frozen=True)
class SwitchEvent:
    kind: Switch
    k: int
    t_hat: float  # hours since series start


@dataclass(frozen=True)
class HeatingCycle:
    t_off: float
    t_on: float
    t_off_next: float
    d_on: float
    d_off: float
    theta_mean_off: float
    theta_mean_cycle: float


def local_extrema(v: np.ndarray) -> np.ndarray:
    """Indices of strict local maxima and minima of ``v``.

    A plateau counts once, at its first index. NaN entries act as missing
    neighbours; a run needs at least one real neighbour to qualify.
    """
    v = np.asarray(v, dtype=float)
    n = len(v)
    if n == 0:
        return np.array([], dtype=int)
    # NaN != NaN, so every NaN starts its own run
    change = np.ones(n, dtype=bool)
    change[1:] = ~(v[1:] == v[:-1])
    starts = np.flatnonzero(change)
    rv = v[starts]
    m = len(rv)
    left = np.full(m, np.nan)
    right = np.full(m, np.nan)
    left[1:] = rv[:-1]
    right[:-1] = rv[1:]
    has_l = ~np.isnan(left)
    has_r = ~np.isnan(right)
    real = ~np.isnan(rv)
    with np.errstate(invalid="ignore"):
        is_max = (~has_l | (left < rv)) & (~has_r | (right < rv))
        is_min = (~has_l | (left > rv)) & (~has_r | (right > rv))
    keep = real & (has_l | has_r) & (is_max | is_min)
    return starts[keep]


def delta2(p: PowerSeries) -> Delta2Series:
    x = np.asarray(p.p if isinstance(p, PowerSeries) else p, dtype=float)
    if len(x) < 3:
        raise LengthError("delta2 needs at least 3 power values")
    values = np.full(len(x), np.nan)
    values[2:] = x[2:] - x[:-2]
    ext = local_extrema(values[2:]) + 2
    values.setflags(write=False)
    return Delta2Series(values=values, extrema_idx=ext)


def kmeans_1d(x: np.ndarray, init, max_iter: int = 1000):
    """Lloyd's algorithm on scalars, iterated to an assignment fixpoint.

    Returns (labels, centroids). Empty clusters keep their last centroid.
    """
    x = np.asarray(x, dtype=float)
    c = np.array(init, dtype=float)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            members = x[labels == j]
            if len(members):
                c[j] = members.mean()
    return labels, c


def cluster_extrema(d2: Delta2Series, return_centroids: bool = False):
    """Split extrema into off / noise / on index sets by 3-means."""
    idx = d2.extrema_idx
    vals = d2.values[idx]
    if len(vals) < 3 or not (np.any(vals > 0) and np.any(vals < 0)):
        raise DegenerateClusterError("need positive and negative switching extrema")
    labels, c = kmeans_1d(vals, [vals.min(), 0.0, vals.max()])
    counts = np.bincount(labels, minlength=3)
    if np.any(counts == 0):
        raise DegenerateClusterError(f"empty cluster after k-means (sizes {counts.tolist()})")
    if not (c[0] <= -MIN_EDGE_KW and c[2] >= MIN_EDGE_KW):
        raise DegenerateClusterError(f"cluster centroids {c.tolist()} lack on/off separation")
    sets = idx[labels == 0], idx[labels == 1], idx[labels == 2]
    return (*sets, c) if return_centroids else sets


def cluster_thresholds(d2: Delta2Series) -> SwitchThresholds:
    off_idx, _, on_idx, c = cluster_extrema(d2, return_centroids=True)
    on = float(np.quantile(d2.values[on_idx], 0.05))
    off = float(np.quantile(d2.values[off_idx], 0.95))
    return SwitchThresholds(
        delta2_on=on,
        delta2_off=off,
        recover_on=min(on, float((c[1] + c[2]) / 2)),
        recover_off=max(off, float((c[0] + c[1]) / 2)),
    )


def estimate_switch_time(p: PowerSeries, k: int) -> float:
    """Sub-interval switching time (hours) for an edge detected at ``k``.

    Assumes an ideal step inside interval k-1, which makes p[k-1] a
    time-weighted blend of p[k-2] and p[k].
    """
    x = p.p
    ts = p.step_h
    if k < 2:
        raise LengthError("switch index must be >= 2")
    denom = x[k] - x[k - 2]
    if denom == 0 or np.isnan(denom) or np.isnan(x[k - 1]):
        raise UndefinedEdge(f"p[{k}] == p[{k - 2}] or masked neighbour")
    t = ts * (k - 1) + ts * (x[k] - x[k - 1]) / denom
    return float(min(max(t, ts * (k - 1)), ts * (k + 1)))


def detect_switch_events(p: PowerSeries, th: SwitchThresholds,
                         min_on: float = DEFAULT_MIN_ON_H, min_off: float = DEFAULT_MIN_OFF_H,
                         d2: Delta2Series | None = None) -> list[SwitchEvent]:
    """Strictly alternating on/off events from threshold crossings.

    Candidates are the local extrema of the two-step difference. A crossing
    is kept only if it flips the tracked state and the phase it ends lasted
    at least ``min_on`` / ``min_off`` hours. A crossing that repeats the
    current state means the opposite edge was missed; if the thresholds
    carry recovery bounds, the strongest opposite extremum since the last
    event is inserted when it lies beyond its bound.
    """
    if min_on < 0 or min_off < 0:
        raise ValueError("minimum durations must be non-negative")
    if d2 is None:
        d2 = delta2(p)
    ext = d2.extrema_idx
    vals = d2.values

    def switch_time(k):
        try:
            return estimate_switch_time(p, int(k))
        except UndefinedEdge:
            return p.step_h * k

    def long_enough(kind, t, prev):
        # phase that just ended is the opposite of the new kind
        needed = min_on if kind is Switch.OFF else min_off
        return prev is None or t - prev.t_hat >= needed

    def recover(kind, k):
        """Missed edge of ``kind.opposite`` between the last event and k."""
        bound = th.recover_off if kind is Switch.ON else th.recover_on
        if bound is None or not events:
            return None
        lo = np.searchsorted(ext, events[-1].k, side="right")
        hi = np.searchsorted(ext, k, side="left")
        cand = ext[lo:hi]
        if len(cand) == 0:
            return None
        v = vals[cand]
        j = int(np.argmin(v)) if kind is Switch.ON else int(np.argmax(v))
        if (kind is Switch.ON and v[j] > bound) or (kind is Switch.OFF and v[j] < bound):
            return None
        kk = int(cand[j])
        ev = SwitchEvent(kind=kind.opposite, k=kk, t_hat=switch_time(kk))
        return ev if long_enough(ev.kind, ev.t_hat, events[-1]) else None

    events: list[SwitchEvent] = []
    state = None
    for k in ext:
        v = vals[k]
        if v >= th.delta2_on:
            kind = Switch.ON
        elif v <= th.delta2_off:
            kind = Switch.OFF
        else:
            continue
        if kind == state:
            missed = recover(kind, k)
            if missed is None:
                continue
            events.append(missed)
            state = missed.kind
        t = switch_time(k)
        if not long_enough(kind, t, events[-1] if events else None):
            continue
        events.append(SwitchEvent(kind=kind, k=int(k), t_hat=t))
        state = kind
    return events


def _overlaps(a, b, spans):
    return any(lo < b and hi > a for lo, hi in spans)


def cycles_from_events(events, theta: TemperatureSeries,
                       masked=()) -> list[HeatingCycle]:
    """Complete (off, on, off) cycles; partial cycles at the ends are dropped.

    ``theta`` must share the time origin of the events (e.g. aligned to the
    meter grid). Cycles overlapping any ``masked`` (start_h, end_h) span are
    skipped because an edge may hide in the gap.
    """
    out = []
    for i in range(len(events) - 2):
        a, b, c = events[i], events[i + 1], events[i + 2]
        if not (a.kind is Switch.OFF and b.kind is Switch.ON and c.kind is Switch.OFF):
            continue
        if _overlaps(a.t_hat, c.t_hat, masked):
            continue
        d_off = b.t_hat - a.t_hat
        d_on = c.t_hat - b.t_hat
        if d_off <= 0 or d_on <= 0:
            continue
        out.append(HeatingCycle(
            t_off=a.t_hat, t_on=b.t_hat, t_off_next=c.t_hat, d_on=d_on, d_off=d_off,
            theta_mean_off=float(theta.mean_between(a.t_hat, b.t_hat)),
            theta_mean_cycle=float(theta.mean_between(a.t_hat, c.t_hat)),
        ))
    return out


def estimate_rated_power(d2: Delta2Series, on_idx, off_idx) -> float:
    on_idx = np.asarray(on_idx, dtype=int)
    off_idx = np.asarray(off_idx, dtype=int)
    if len(on_idx) == 0 or len(off_idx) == 0:
        raise EmptySetError("rated power needs at least one on and one off edge")
    return float((np.median(d2.values[on_idx]) - np.median(d2.values[off_idx])) / 2.0)


@dataclass(frozen=True, eq=False)
class Detection:
    d2: Delta2Series
    thresholds: SwitchThresholds
    events: list
    cycles: list
    p_r: float


def detect(p: PowerSeries, theta: TemperatureSeries,
           min_on: float = DEFAULT_MIN_ON_H, min_off: float = DEFAULT_MIN_OFF_H) -> Detection:
    """Full per-building detection: thresholds, events, cycles, rated power."""
    d2 = delta2(p)
    th = cluster_thresholds(d2)
    events = detect_switch_events(p, th, min_on, min_off, d2=d2)
    on_idx = [e.k for e in events if e.kind is Switch.ON]
    off_idx = [e.k for e in events if e.kind is Switch.OFF]
    p_r = estimate_rated_power(d2, on_idx, off_idx)
    cycles = cycles_from_events(events, theta, masked=p.masked_intervals())
    return Detection(d2=d2, thresholds=th, events=events, cycles=cycles, p_r=p_r)


def write_events_csv(path, events, t0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "k", "t_hat_iso"])
        for e in events:
            w.writerow([e.kind.value, e.k, format_timestamp(t0 + timedelta(hours=e.t_hat))])


def write_cycles_csv(path, cycles, t0) -> None:
    def iso(h):
        return format_timestamp(t0 + timedelta(hours=h))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_off", "t_on", "t_off_next", "d_on_h", "d_off_h", "theta_off_c", "theta_cycle_c"])
        for c in cycles:
            w.writerow([iso(c.t_off), iso(c.t_on), iso(c.t_off_next), f"{c.d_on:.6f}",
                        f"{c.d_off:.6f}", f"{c.theta_mean_off:.4f}", f"{c.theta_mean_cycle:.4f}"])
