"""Feasible power trajectories of one building over an N-step horizon.

SOC recursion: x[k+1] = x[k] + t_s*(r_c(theta[k])*u[k] - r_l(theta[k])),
u[k] in {0, 1}, with 0 <= x[k] <= 1 for k = 1..N. In matrix form
x = x0*1 + B u - d, where B is lower triangular (diagonal included) with
column j equal to t_s*r_c(theta[j]) and d[i] = t_s*sum_{k<=i} r_l(theta[k]).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import InfeasibleStateError
from .meter_ingest import format_timestamp
from .thermal_id import BuildingModel

SOC_TOL = 1e-9
MAX_DP_STATES = 200_000


@dataclass(frozen=True, eq=False)
class FlexHorizon:
    N: int
    t_s: float  # hours
    theta_hat: np.ndarray

    def __post_init__(self):
        th = np.array(self.theta_hat, dtype=float)
        th.setflags(write=False)
        object.__setattr__(self, "theta_hat", th)
        if self.N < 1 or self.t_s <= 0 or len(th) != self.N:
            raise ValueError("horizon needs N >= 1, t_s > 0 and N temperature forecasts")

    @classmethod
    def constant(cls, N: int, t_s: float, theta: float) -> "FlexHorizon":
        return cls(N, t_s, np.full(N, float(theta)))


@dataclass(frozen=True, eq=False)
class FlexPolytope:
    N: int
    t_s: float
    x0_hat: float
    p_r: float
    B: np.ndarray
    d: np.ndarray

    @property
    def charge_steps(self) -> np.ndarray:
        """Per-step SOC gain when on, t_s*r_c(theta[k])."""
        return np.diag(self.B).copy()

    @property
    def loss_steps(self) -> np.ndarray:
        return np.diff(self.d, prepend=0.0)

    @property
    def A(self) -> np.ndarray:
        return np.vstack([self.B, -self.B])

    @property
    def b(self) -> np.ndarray:
        ones = np.ones(self.N)
        return self.p_r * np.concatenate([(1 - self.x0_hat) * ones + self.d,
                                          self.x0_hat * ones - self.d])

    def to_dict(self) -> dict:
        return {"N": self.N, "t_s_h": self.t_s, "x0": self.x0_hat, "p_r_kw": self.p_r,
                "B": self.B.tolist(), "d": self.d.tolist()}


@dataclass(frozen=True, eq=False)
class EnergyEnvelope:
    e_min_cum: np.ndarray
    e_max_cum: np.ndarray


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    reason: str | None = None
    row: int | None = None

    def __bool__(self):
        return self.feasible


def predict_soc(m: BuildingModel, h: FlexHorizon, x0: float, u) -> np.ndarray:
    """SOC after each of the N steps; values may leave [0, 1]."""
    u = np.asarray(u, dtype=float)
    if len(u) != h.N:
        raise ValueError("input sequence length must equal N")
    rc = m.charge_rate(h.theta_hat)
    rl = m.loss_rate(h.theta_hat)
    x = np.empty(h.N)
    cur = float(x0)
    for k in range(h.N):
        cur = cur + h.t_s * (rc[k] * u[k] - rl[k])
        x[k] = cur
    return x


def _hours(t) -> float:
    if isinstance(t, timedelta):
        return t.total_seconds() / 3600.0
    return float(t)


def initial_soc(m: BuildingModel, last_on, last_off, now, theta_mean: float) -> float:
    """SOC estimate from the time elapsed since the last switching action.

    Times may be datetimes or float hours on a common axis.
    """
    if last_off > last_on:
        x = 1.0 - float(m.loss_rate(theta_mean)) * _hours(now - last_off)
    else:
        x = float(m.charge_rate(theta_mean)) * _hours(now - last_on)
    return min(1.0, max(0.0, x))


def build_polytope(m: BuildingModel, h: FlexHorizon, x0: float) -> FlexPolytope:
    if not 0.0 <= x0 <= 1.0:
        raise ValueError("x0 must lie in [0, 1]")
    rc = np.asarray(m.charge_rate(h.theta_hat), dtype=float)
    if np.any(rc <= 0):
        raise ValueError("charge rate must be positive over the horizon")
    rl = np.asarray(m.loss_rate(h.theta_hat), dtype=float)
    B = np.tril(np.tile(h.t_s * rc, (h.N, 1)))
    d = h.t_s * np.cumsum(rl)
    B.setflags(write=False)
    d.setflags(write=False)
    return FlexPolytope(N=h.N, t_s=h.t_s, x0_hat=float(x0), p_r=m.p_r, B=B, d=d)


def is_feasible(poly: FlexPolytope, p) -> FeasibilityReport:
    p = np.asarray(p, dtype=float)
    if len(p) != poly.N:
        raise ValueError("power trajectory length must equal N")
    tol_p = SOC_TOL * poly.p_r
    level_ok = (np.abs(p) <= tol_p) | (np.abs(p - poly.p_r) <= tol_p)
    if not np.all(level_ok):
        k = int(np.flatnonzero(~level_ok)[0])
        return FeasibilityReport(False, f"power level {p[k]:g} kW at step {k} not in {{0, p_r}}", k)
    lhs = poly.A @ p / poly.p_r
    rhs = poly.b / poly.p_r
    bad = lhs > rhs + SOC_TOL
    if np.any(bad):
        r = int(np.flatnonzero(bad)[0])
        side = "upper" if r < poly.N else "lower"
        return FeasibilityReport(False, f"{side} SOC bound violated at step {r % poly.N + 1}", r)
    return FeasibilityReport(True)


def _envelope_dp(poly: FlexPolytope, max_states: int):
    """Exact on-step count envelopes by merging equal-SOC states.

    Returns (min_counts, max_counts) per step, or None if the state set
    grows beyond ``max_states``.
    """
    c = poly.charge_steps
    a = poly.loss_steps
    xs = [np.array([poly.x0_hat])]
    mx = [np.array([0])]
    mn = [np.array([0])]
    succ = []
    for n in range(poly.N):
        x = xs[-1]
        cand = np.concatenate([x - a[n], x + c[n] - a[n]])
        src = np.concatenate([np.arange(len(x)), np.arange(len(x))])
        on = np.repeat([0, 1], len(x))
        ok = (cand >= -SOC_TOL) & (cand <= 1 + SOC_TOL)
        keys, inv = np.unique(np.round(cand[ok], 12), return_inverse=True)
        if len(keys) == 0:
            raise InfeasibleStateError(f"SOC cannot be kept within [0, 1] at step {n + 1}")
        if len(keys) > max_states:
            return None
        nxt_max = np.full(len(keys), -1)
        nxt_min = np.full(len(keys), poly.N + 1)
        np.maximum.at(nxt_max, inv, mx[-1][src[ok]] + on[ok])
        np.minimum.at(nxt_min, inv, mn[-1][src[ok]] + on[ok])
        s = np.full((2, len(x)), -1)
        s[on[ok], src[ok]] = inv
        succ.append(s)
        xs.append(keys)
        mx.append(nxt_max)
        mn.append(nxt_min)
    alive = np.ones(len(xs[-1]), dtype=bool)
    lo = np.empty(poly.N, dtype=int)
    hi = np.empty(poly.N, dtype=int)
    for n in range(poly.N, 0, -1):
        if not alive.any():
            raise InfeasibleStateError("no binary trajectory keeps the SOC within [0, 1]")
        lo[n - 1] = mn[n][alive].min()
        hi[n - 1] = mx[n][alive].max()
        s = succ[n - 1]
        alive = ((s[0] >= 0) & alive[np.maximum(s[0], 0)]) | ((s[1] >= 0) & alive[np.maximum(s[1], 0)])
    if not alive[0]:
        raise InfeasibleStateError("no binary trajectory keeps the SOC within [0, 1]")
    return lo, hi


def _envelope_milp(poly: FlexPolytope):
    from scipy.optimize import Bounds, LinearConstraint, milp

    N = poly.N
    cons = LinearConstraint(poly.B, poly.d - poly.x0_hat - SOC_TOL, 1 - poly.x0_hat + poly.d + SOC_TOL)
    lo = np.empty(N, dtype=int)
    hi = np.empty(N, dtype=int)
    for n in range(1, N + 1):
        obj = np.zeros(N)
        obj[:n] = 1.0
        for sign, out in ((1.0, lo), (-1.0, hi)):
            res = milp(sign * obj, constraints=cons, integrality=np.ones(N), bounds=Bounds(0, 1))
            if res.status == 2:
                raise InfeasibleStateError("no binary trajectory keeps the SOC within [0, 1]")
            if not res.success:
                raise RuntimeError(f"MILP envelope failed: {res.message}")
            out[n - 1] = int(round(sign * res.fun))
    return lo, hi


def energy_envelope(poly: FlexPolytope, max_states: int = MAX_DP_STATES) -> EnergyEnvelope:
    """Min/max cumulative energy (kWh) over all feasible binary trajectories.

    Exact. Equal-SOC states are merged so the search stays polynomial when
    charge steps repeat (constant or piecewise-constant forecasts); a MILP
    takes over if the state set still grows past ``max_states``.
    """
    res = _envelope_dp(poly, max_states)
    if res is None:
        res = _envelope_milp(poly)
    lo, hi = res
    step_kwh = poly.t_s * poly.p_r
    return EnergyEnvelope(e_min_cum=lo * step_kwh, e_max_cum=hi * step_kwh)


def max_deferral(poly: FlexPolytope) -> int:
    """Number of leading steps the heating can stay off."""
    x = poly.x0_hat - poly.d
    bad = np.flatnonzero(x < -SOC_TOL)
    return int(bad[0]) if len(bad) else poly.N


def write_envelope_csv(path, env: EnergyEnvelope, start: datetime, t_s: float) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t_iso", "e_min_kwh", "e_max_kwh"])
        for n, (lo, hi) in enumerate(zip(env.e_min_cum, env.e_max_cum), start=1):
            w.writerow([n, format_timestamp(start + timedelta(hours=n * t_s)), f"{lo:.6f}", f"{hi:.6f}"])
