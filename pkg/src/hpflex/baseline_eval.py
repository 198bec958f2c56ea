"""Scoring of realized demand-response events against predictions.

The baseline is a reference group scaled by least squares to the
controlled group before the event, then smoothed with a Whittaker-Eilers
smoother (second-difference penalty). Load reduction and rebound are
deviations of the controlled group from that baseline.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy.linalg import solveh_banded

from .errors import CoverageError, ZeroReferenceError
from .meter_ingest import PowerSeries
from .simulate import DREventPlan

PRE_WINDOW_H = 8.0
POST_WINDOW_H = 3.0
LAMBDA = 100.0


class UndefinedAPEWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class BaselineResult:
    alpha: float
    baseline: np.ndarray
    deviation: np.ndarray  # controlled - baseline
    t0: datetime
    step_s: float


@dataclass(frozen=True)
class PredictionReport:
    predicted_reduction_kw: float
    realized_avg_reduction_kw: float
    predicted_peak_rebound_kw: float
    realized_peak_rebound_kw: float
    ape_reduction: float
    ape_rebound: float
    alpha: float = math.nan

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def _index(series: PowerSeries, t: datetime) -> float:
    return (t - series.t0).total_seconds() / series.step_s


def scale_reference(p_ctrl, p_ref, window: float = PRE_WINDOW_H, t_end: datetime | None = None) -> float:
    """Least-squares scale alpha = sum(ctrl*ref)/sum(ref^2).

    Uses the ``window`` hours ending at ``t_end`` (default: the whole
    overlap of plain arrays, or the last ``window`` hours of the series).
    """
    if isinstance(p_ctrl, PowerSeries):
        if t_end is None:
            t_end = p_ctrl.time_at(len(p_ctrl) * p_ctrl.step_h)
        c = _slice(p_ctrl, t_end - timedelta(hours=window), t_end)
        r = _slice(p_ref, t_end - timedelta(hours=window), t_end)
    else:
        c = np.asarray(p_ctrl, dtype=float)
        r = np.asarray(p_ref, dtype=float)
    ok = ~(np.isnan(c) | np.isnan(r))
    den = float(np.sum(r[ok] ** 2))
    if den == 0.0:
        raise ZeroReferenceError("reference power is zero over the scaling window")
    return float(np.sum(c[ok] * r[ok]) / den)


def _slice(series: PowerSeries, a: datetime, b: datetime) -> np.ndarray:
    ia = _index(series, a)
    ib = _index(series, b)
    lo, hi = int(math.ceil(ia - 1e-9)), int(math.floor(ib + 1e-9))
    if lo < 0 or hi > len(series) or hi <= lo:
        raise CoverageError(f"series does not cover [{a}, {b}]")
    return np.asarray(series.p[lo:hi], dtype=float)


def _second_difference_bands(n: int, lam: float) -> np.ndarray:
    """Lower banded form of I + lam * D'D for the second-difference D."""
    d = np.array([1.0, -2.0, 1.0])
    bands = np.zeros((3, n))
    for k in range(n - 2):
        for i in range(3):
            for j in range(i, 3):
                bands[j - i, k + i] += lam * d[i] * d[j]
    bands[0] += 1.0
    return bands


def smooth_baseline(y, lam: float = LAMBDA) -> np.ndarray:
    """Whittaker-Eilers smoother: argmin |z - y|^2 + lam |D2 z|^2."""
    y = np.asarray(y.p if isinstance(y, PowerSeries) else y, dtype=float)
    if len(y) < 5:
        raise ValueError("smoothing needs at least 5 points")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return solveh_banded(_second_difference_bands(len(y), lam), y, lower=True)


def event_window(event: DREventPlan, pre: float = PRE_WINDOW_H, post: float = POST_WINDOW_H):
    last_release = max(event.release_times.values(), default=event.t_end)
    return event.t_start - timedelta(hours=pre), max(last_release, event.t_end) + timedelta(hours=post)


def fit_baseline(p_ctrl: PowerSeries, p_ref: PowerSeries, event: DREventPlan,
                 pre: float = PRE_WINDOW_H, post: float = POST_WINDOW_H,
                 lam: float = LAMBDA) -> BaselineResult:
    a, b = event_window(event, pre, post)
    alpha = scale_reference(p_ctrl, p_ref, pre, t_end=event.t_start)
    ctrl = _slice(p_ctrl, a, b)
    ref = _slice(p_ref, a, b)
    if np.any(np.isnan(ref)) or np.any(np.isnan(ctrl)):
        raise CoverageError("masked intervals inside the event window")
    base = smooth_baseline(alpha * ref, lam)
    t0 = p_ctrl.t0 + timedelta(seconds=p_ctrl.step_s * math.ceil(_index(p_ctrl, a) - 1e-9))
    return BaselineResult(alpha=alpha, baseline=base, deviation=ctrl - base, t0=t0, step_s=p_ctrl.step_s)


def ape(predicted: float, realized: float, atol: float = 1e-9) -> float:
    """|predicted - realized| / |realized|; NaN with a warning if realized is 0.

    ``atol`` (kW) absorbs solver round-off on events with no deviation.
    """
    if abs(realized) <= atol:
        warnings.warn("realized value is zero, APE undefined", UndefinedAPEWarning, stacklevel=2)
        return math.nan
    return abs(predicted - realized) / abs(realized)


def score_event(p_ctrl: PowerSeries, p_ref: PowerSeries, event: DREventPlan, predictions,
                pre: float = PRE_WINDOW_H, post: float = POST_WINDOW_H,
                lam: float = LAMBDA) -> PredictionReport:
    """Compare realized reduction and rebound with ``predictions``.

    ``predictions`` is (reduction_kw, peak_rebound_kw). Reduction is the
    mean of baseline - controlled over the throttle window; peak rebound
    is the max of controlled - baseline from the first release to the end
    of the window.
    """
    pred_red, pred_reb = (float(v) for v in predictions)
    res = fit_baseline(p_ctrl, p_ref, event, pre, post, lam)
    step_h = res.step_s / 3600.0

    def idx(t):
        return (t - res.t0).total_seconds() / 3600.0 / step_h

    k0 = int(math.ceil(idx(event.t_start) - 1e-9))
    k1 = int(math.floor(idx(event.t_end) + 1e-9))
    first_rel = min(event.release_times.values(), default=event.t_end)
    k2 = int(math.floor(idx(first_rel) + 1e-9))
    if k1 <= k0:
        raise CoverageError("throttle window shorter than one reporting step")
    realized_red = float(np.mean(-res.deviation[k0:k1]))
    realized_reb = float(np.max(res.deviation[k2:]))
    return PredictionReport(
        predicted_reduction_kw=pred_red,
        realized_avg_reduction_kw=realized_red,
        predicted_peak_rebound_kw=pred_reb,
        realized_peak_rebound_kw=realized_reb,
        ape_reduction=ape(pred_red, realized_red),
        ape_rebound=ape(pred_reb, realized_reb),
        alpha=res.alpha,
    )


def ape_statistics(reports) -> dict:
    """Quartiles (linear interpolation) of reduction and rebound APEs."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    out = {"n_events": len(reports)}
    for key in ("ape_reduction", "ape_rebound"):
        v = np.array([getattr(r, key) for r in reports], dtype=float)
        v = v[~np.isnan(v)]
        if len(v) == 0:
            q = [None, None, None]
        else:
            q = [float(x) for x in np.quantile(v, [0.25, 0.5, 0.75])]
        out[key] = {"q25": q[0], "median": q[1], "q75": q[2], "n": int(len(v))}
    return out


def write_report_json(path, report: PredictionReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def write_statistics_json(path, stats: dict) -> None:
    Path(path).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
