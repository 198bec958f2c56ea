"""Identification of normalized loss/charge rates from heating cycles.

Per cycle, r_l = 1/d_off and r_c = 1/d_on + 1/d_off (units 1/h). Across
cycles, r_l is modelled as max(0, a_l*theta + b_l) and r_c as
c_c*(a_c*theta + b_c + 273.15)/((a_c - 1)*theta + b_c).
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .errors import (ExtrapolationWarning, InsufficientDataError, NonConvergenceError,
                     SlopeSignError, ZeroLossError)

KELVIN = 273.15
VALID_THETA = (-30.0, 25.0)
HUBER_C = 1.345
MIN_PHASE_H = 10 / 60


@dataclass(frozen=True)
class CycleRates:
    r_c: float
    r_l: float
    theta_off: float
    theta_cycle: float


@dataclass(frozen=True)
class LossRateModel:
    a_l: float
    b_l: float

    def __call__(self, theta):
        return np.maximum(0.0, self.a_l * np.asarray(theta, dtype=float) + self.b_l)

    @property
    def zero_loss_temperature(self) -> float:
        return -self.b_l / self.a_l if self.a_l != 0 else math.inf

    def to_dict(self):
        return {"a_l": self.a_l, "b_l": self.b_l}


@dataclass(frozen=True)
class ChargeRateModel:
    a_c: float
    b_c: float
    c_c: float

    def denominator(self, theta):
        return (self.a_c - 1.0) * np.asarray(theta, dtype=float) + self.b_c

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.c_c * (self.a_c * theta + self.b_c + KELVIN) / self.denominator(theta)

    def to_dict(self):
        return {"a_c": self.a_c, "b_c": self.b_c, "c_c": self.c_c}


@dataclass(frozen=True)
class ConstantRate:
    """Temperature-independent rate, for what-if studies and tests."""

    rate: float

    def __call__(self, theta):
        return np.full(np.shape(theta), float(self.rate)) if np.ndim(theta) else float(self.rate)

    def to_dict(self):
        return {"constant": self.rate}


def _rate_from_dict(d):
    if "constant" in d:
        return ConstantRate(float(d["constant"]))
    if "a_l" in d:
        return LossRateModel(float(d["a_l"]), float(d["b_l"]))
    return ChargeRateModel(float(d["a_c"]), float(d["b_c"]), float(d["c_c"]))


@dataclass(frozen=True)
class BuildingModel:
    building_id: str
    p_r: float
    loss: LossRateModel | ConstantRate
    charge: ChargeRateModel | ConstantRate
    f: float = 1.0
    valid_theta: tuple[float, float] = field(default=VALID_THETA)

    def __post_init__(self):
        if not self.p_r > 0:
            raise ValueError(f"{self.building_id}: rated power must be positive")
        if not self.f >= 1:
            raise ValueError(f"{self.building_id}: flexibility factor must be >= 1")

    def _check(self, theta):
        lo, hi = self.valid_theta
        t = np.asarray(theta, dtype=float)
        if np.any((t < lo) | (t > hi)):
            warnings.warn(f"{self.building_id}: theta outside validity range [{lo}, {hi}] C",
                          ExtrapolationWarning, stacklevel=3)

    def loss_rate(self, theta):
        self._check(theta)
        return self.loss(theta)

    def charge_rate(self, theta):
        self._check(theta)
        return self.charge(theta)

    def with_f(self, f: float) -> "BuildingModel":
        return BuildingModel(self.building_id, self.p_r, self.loss, self.charge, f, self.valid_theta)

    def to_dict(self) -> dict:
        return {
            "building_id": self.building_id,
            "p_r_kw": self.p_r,
            "f": self.f,
            "loss": self.loss.to_dict(),
            "charge": self.charge.to_dict(),
            "valid_theta_c": list(self.valid_theta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildingModel":
        return cls(
            building_id=str(d["building_id"]),
            p_r=float(d["p_r_kw"]),
            loss=_rate_from_dict(d["loss"]),
            charge=_rate_from_dict(d["charge"]),
            f=float(d.get("f", 1.0)),
            valid_theta=tuple(d.get("valid_theta_c", VALID_THETA)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BuildingModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def rates_from_cycles(cycles) -> list[CycleRates]:
    return [
        CycleRates(r_c=1.0 / c.d_on + 1.0 / c.d_off, r_l=1.0 / c.d_off,
                   theta_off=c.theta_mean_off, theta_cycle=c.theta_mean_cycle)
        for c in cycles
    ]


def _check_samples(theta, r, min_samples=10, min_span=5.0):
    theta = np.asarray(theta, dtype=float)
    r = np.asarray(r, dtype=float)
    if theta.shape != r.shape:
        raise ValueError("theta and rate samples differ in length")
    ok = np.isfinite(theta) & np.isfinite(r)
    theta, r = theta[ok], r[ok]
    if len(theta) < min_samples:
        raise InsufficientDataError(f"{len(theta)} samples, need at least {min_samples}")
    if np.ptp(theta) < min_span:
        raise InsufficientDataError(f"temperature span {np.ptp(theta):.2f} C < {min_span} C")
    return theta, r


def robust_scale(resid: np.ndarray, floor: float) -> float:
    """Normalized median absolute deviation, bounded below by ``floor``."""
    mad = np.median(np.abs(resid - np.median(resid))) / 0.6744897501960817
    return max(float(mad), floor)


def huber_weights(resid: np.ndarray, scale: float, c: float = HUBER_C) -> np.ndarray:
    u = np.abs(resid) / scale
    with np.errstate(divide="ignore"):
        return np.where(u <= c, 1.0, c / u)


def fit_loss_rate(theta, r_l, c: float = HUBER_C, max_iter: int = 50,
                  tol: float = 1e-8) -> LossRateModel:
    """Huber-IRLS affine fit r_l ~ a_l*theta + b_l.

    The max(0, .) clamp belongs to evaluation, not to fitting.
    """
    theta, y = _check_samples(theta, r_l)
    X = np.column_stack([theta, np.ones_like(theta)])
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    floor = 1e-12 * max(1.0, float(np.median(np.abs(y))))
    for _ in range(max_iter):
        resid = y - X @ beta
        w = huber_weights(resid, robust_scale(resid, floor), c)
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        done = np.all(np.abs(new - beta) <= tol * (1.0 + np.abs(beta)))
        beta = new
        if done:
            break
    a_l, b_l = float(beta[0]), float(beta[1])
    if a_l >= 0:
        raise SlopeSignError(f"fitted loss slope a_l={a_l:.4g} is not negative")
    return LossRateModel(a_l, b_l)


class _ChargeParam:
    """(log D(lo), log D(hi), c_c) <-> (a_c, b_c, c_c).

    D(theta) = (a_c - 1)*theta + b_c is affine, so positivity at both ends
    of the validity range implies positivity across it.
    """

    def __init__(self, lo: float, hi: float):
        self.lo, self.hi = lo, hi

    def to_model(self, z) -> ChargeRateModel:
        d_lo, d_hi = math.exp(z[0]), math.exp(z[1])
        slope = (d_hi - d_lo) / (self.hi - self.lo)
        return ChargeRateModel(a_c=slope + 1.0, b_c=d_lo - slope * self.lo, c_c=float(z[2]))

    def from_model(self, m: ChargeRateModel) -> np.ndarray:
        return np.array([math.log(m.denominator(self.lo)), math.log(m.denominator(self.hi)), m.c_c])

    def predict(self, z, theta):
        # LM probes can overflow exp(); the resulting inf/nan residuals are rejected
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            d_lo, d_hi = np.exp(z[0]), np.exp(z[1])
            den = d_lo + (d_hi - d_lo) * (theta - self.lo) / (self.hi - self.lo)
            return z[2] * (den + theta + KELVIN) / den


def fit_charge_rate(theta, r_c, c: float = HUBER_C, max_outer: int = 200, tol: float = 1e-8,
                    valid_theta: tuple[float, float] = VALID_THETA) -> ChargeRateModel:
    """Robust nonlinear fit of the charge-rate curve.

    Outer Huber reweighting around an inner Levenberg-Marquardt solve. The
    denominator is kept positive over ``valid_theta`` by construction.
    """
    theta, y = _check_samples(theta, r_c)
    par = _ChargeParam(*valid_theta)
    init = ChargeRateModel(a_c=-2.0, b_c=330.0, c_c=float(np.mean(y)))
    z = par.from_model(init)
    w = np.ones_like(y)
    floor = 1e-12 * max(1.0, float(np.median(np.abs(y))))
    pred = par.predict(z, theta)
    for _ in range(max_outer):
        sw = np.sqrt(w)
        sol = least_squares(lambda q: sw * (par.predict(q, theta) - y), z, method="lm",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        z_new = sol.x
        pred_new = par.predict(z_new, theta)
        if not np.all(np.isfinite(pred_new)):
            raise NonConvergenceError("charge-rate fit diverged")
        small_step = np.all(np.abs(z_new - z) <= tol * (1.0 + np.abs(z)))
        same_fit = np.max(np.abs(pred_new - pred)) <= tol * (1.0 + np.max(np.abs(pred)))
        z, pred = z_new, pred_new
        resid = y - pred
        w_new = huber_weights(resid, robust_scale(resid, floor), c)
        if small_step or same_fit:
            return par.to_model(z)
        w = w_new
    raise NonConvergenceError(f"charge-rate IRLS did not converge in {max_outer} iterations")


def duty_cycle(m: BuildingModel, theta):
    rl = m.loss_rate(theta)
    rc = m.charge_rate(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rc > 0, rl / np.where(rc > 0, rc, 1.0), 1.0)
    out = np.minimum(1.0, np.maximum(0.0, ratio))
    return float(out) if np.ndim(out) == 0 else out


def max_off_duration(m: BuildingModel, theta, strict: bool = False):
    """Longest admissible off-time f / r_l(theta) in hours (inf at zero loss)."""
    rl = np.asarray(m.loss_rate(theta), dtype=float)
    if strict and np.any(rl <= 0):
        raise ZeroLossError(f"{m.building_id}: zero loss rate, off-duration unbounded")
    with np.errstate(divide="ignore"):
        out = np.where(rl > 0, m.f / np.where(rl > 0, rl, 1.0), math.inf)
    return float(out) if out.ndim == 0 else out


def max_throttle_duration(m: BuildingModel, theta, strict: bool = False):
    """Longest admissible throttle (f - 1) / r_l(theta) in hours.

    Zero when f == 1 regardless of the loss rate; inf at zero loss otherwise.
    """
    rl = np.asarray(m.loss_rate(theta), dtype=float)
    if m.f == 1.0:
        out = np.zeros_like(rl)
    else:
        if strict and np.any(rl <= 0):
            raise ZeroLossError(f"{m.building_id}: zero loss rate, throttle duration unbounded")
        with np.errstate(divide="ignore"):
            out = np.where(rl > 0, (m.f - 1.0) / np.where(rl > 0, rl, 1.0), math.inf)
    return float(out) if out.ndim == 0 else out


def fit_building(building_id: str, cycles, p_r: float, f: float = 1.0,
                 min_phase_h: float = MIN_PHASE_H, huber_c: float = HUBER_C,
                 max_iter: int = 50, valid_theta=VALID_THETA) -> BuildingModel:
    """Fit loss and charge models from detected cycles.

    Cycles with either phase shorter than ``min_phase_h`` are dropped as
    likely detection artifacts.
    """
    kept = [c for c in cycles if c.d_on >= min_phase_h and c.d_off >= min_phase_h]
    rates = rates_from_cycles(kept)
    th_off = np.array([r.theta_off for r in rates])
    th_cyc = np.array([r.theta_cycle for r in rates])
    loss = fit_loss_rate(th_off, np.array([r.r_l for r in rates]), c=huber_c, max_iter=max_iter)
    charge = fit_charge_rate(th_cyc, np.array([r.r_c for r in rates]), c=huber_c,
                             valid_theta=valid_theta)
    return BuildingModel(building_id=building_id, p_r=p_r, loss=loss, charge=charge, f=f,
                         valid_theta=tuple(valid_theta))


def identify_building(meter, theta, f: float = 1.0, min_on: float = 0.25, min_off: float = 0.25,
                      min_phase_h: float = MIN_PHASE_H, huber_c: float = HUBER_C,
                      max_iter: int = 50, valid_theta=VALID_THETA) -> BuildingModel:
    """Meter series + outdoor temperature -> fitted BuildingModel.

    Runs power differencing, switch detection, cycle extraction and both
    rate fits. ``theta`` may be on any grid covering the meter span.
    """
    from .hp_detect import detect
    from .meter_ingest import align_temperature, power_from_energy

    p = power_from_energy(meter)
    th = align_temperature(theta, p, len(p))
    det = detect(p, th, min_on=min_on, min_off=min_off)
    return fit_building(meter.building_id, det.cycles, det.p_r, f=f, min_phase_h=min_phase_h,
                        huber_c=huber_c, max_iter=max_iter, valid_theta=valid_theta)
