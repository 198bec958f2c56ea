"""Seeded population simulator for thermostat-controlled heat pumps.

Each unit follows dx/dt = r_c(theta) u - r_l(theta) with a hysteresis
thermostat on [0, 1]. Switching inside a step is integrated exactly (the
thermostat crossing time is solved for), so reported energies carry no
step quantization. Throttle and release commands act on step boundaries.

While throttled after its rundown a unit stays off and its SOC may fall
below 0; that deficit is what drives the rebound on release.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import CoverageError, IneligibleBuildingError, ParseError
from .meter_ingest import PowerSeries, TemperatureSeries, format_timestamp, parse_timestamp
from .population import Population, throttle_set
from .thermal_id import BuildingModel, max_throttle_duration

RUNDOWN_MIN = (2.0, 10.0)
DEFAULT_DT_MIN = 1.0
DEFAULT_REPORT_S = 300.0
_MAX_EVENTS_PER_STEP = 64
_EPS = 1e-12

# independent child streams of the run seed
_PHASE, _RESPONSE, _RUNDOWN, _RELEASE = range(4)


def _streams(seed) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


@dataclass(frozen=True)
class SimBuildingState:
    x: float
    on: bool
    throttled: bool = False
    rundown_remaining: float = 0.0  # minutes
    responsive: bool = True


@dataclass(frozen=True)
class DREventPlan:
    group: frozenset
    t_start: datetime
    T: float  # hours
    delta_T: float  # hours
    release_times: dict

    def __post_init__(self):
        if self.T < 0 or self.delta_T < 0:
            raise ValueError("T and delta_T must be non-negative")
        if set(self.release_times) != set(self.group):
            raise ValueError("release_times must cover exactly the group")
        lo = self.t_start
        hi = self.t_start + timedelta(hours=self.T + self.delta_T)
        tol = timedelta(microseconds=1)
        for bid, t in self.release_times.items():
            if not lo - tol <= t <= hi + tol:
                raise ValueError(f"{bid}: release {t} outside [{lo}, {hi}]")

    @property
    def t_end(self) -> datetime:
        return self.t_start + timedelta(hours=self.T)

    def to_dict(self) -> dict:
        return {"t_start": format_timestamp(self.t_start), "T_h": self.T, "delta_T_h": self.delta_T,
                "release_times": {b: format_timestamp(self.release_times[b]) for b in sorted(self.group)}}

    @classmethod
    def from_dict(cls, d: dict) -> "DREventPlan":
        rel = {str(b): parse_timestamp(t) for b, t in d["release_times"].items()}
        return cls(group=frozenset(rel), t_start=parse_timestamp(d["t_start"]), T=float(d["T_h"]),
                   delta_T=float(d["delta_T_h"]), release_times=rel)


def plan_release(pop: Population, group, t_start: datetime, T: float, delta_T: float,
                 theta: float, seed=0) -> DREventPlan:
    """Staggered release schedule t_rel = min(t_end + delta, t_start + T_max).

    delta is uniform on [0, delta_T], drawn per building in sorted-id order.
    """
    group = frozenset(group)
    eligible = throttle_set(pop, theta, T)
    bad = sorted(group - eligible)
    if bad:
        raise IneligibleBuildingError(bad)
    ids = sorted(group)
    rng = _streams(seed)[_RELEASE]
    delta = rng.uniform(0.0, delta_T, size=len(ids)) if delta_T > 0 else np.zeros(len(ids))
    rel = {}
    for bid, dl in zip(ids, delta):
        t_max = max_throttle_duration(pop[bid], theta)
        hours = min(T + float(dl), t_max)
        rel[bid] = t_start + timedelta(hours=hours)
    return DREventPlan(group=group, t_start=t_start, T=float(T), delta_T=float(delta_T), release_times=rel)


def _advance(x, on, rc, rl, blocked, rundown, h):
    """Integrate all units over ``h`` hours with exact switching.

    ``blocked`` units cannot switch on, and running blocked units are
    forced off once their ``rundown`` (hours) expires. Returns (x, on,
    rundown, on_time, switches) where switches is a list of
    (offset_h, unit_idx, new_on).
    """
    x = x.copy()
    on = on.copy()
    rundown = rundown.copy()
    on_time = np.zeros_like(x)
    rem = np.full_like(x, h)
    switches = []
    for _ in range(_MAX_EVENTS_PER_STEP):
        act = rem > _EPS
        if not act.any():
            break
        slope = np.where(on, rc - rl, -rl)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_up = np.where(on & (slope > 0), (1.0 - x) / slope, np.inf)
            t_dn = np.where(~on & ~blocked & (slope < 0), x / -slope, np.inf)
        t_up = np.where(on & (x >= 1.0), 0.0, t_up)
        t_dn = np.where(~on & ~blocked & (x <= 0.0), 0.0, t_dn)
        t_rd = np.where(on & blocked, rundown, np.inf)
        t_ev = np.minimum(np.minimum(t_up, t_dn), t_rd)
        tau = np.where(act, np.minimum(rem, t_ev), 0.0)
        x = x + slope * tau
        on_time = on_time + np.where(on, tau, 0.0)
        rundown = np.where(rundown > 0, np.maximum(rundown - tau, 0.0), 0.0)
        hit = act & (t_ev <= rem)
        if hit.any():
            up = hit & (t_up == t_ev)
            dn = hit & ~up & (t_dn == t_ev)
            rd = hit & ~up & ~dn
            # snap rounding residue only; a deficit built up while throttled is kept
            x = np.where(up, np.maximum(x, 1.0), np.where(dn, np.minimum(x, 0.0), x))
            flip_off = up | rd
            for i in np.flatnonzero(hit):
                switches.append((h - rem[i] + tau[i], int(i), bool(dn[i])))
            on = np.where(flip_off, False, np.where(dn, True, on))
            rundown = np.where(flip_off, 0.0, rundown)
        rem = rem - tau
    return x, on, rundown, on_time, switches


def step(state: SimBuildingState, m: BuildingModel, theta: float, throttle: bool,
         dt: float, rng: np.random.Generator):
    """Advance one unit by ``dt`` minutes; returns (state', mean power kW).

    A rising throttle edge on a responsive running unit starts a rundown
    drawn uniformly in [2, 10] min; a falling edge releases the unit.
    """
    rundown = state.rundown_remaining
    if throttle and not state.throttled:
        rundown = float(rng.uniform(*RUNDOWN_MIN)) if (state.responsive and state.on) else 0.0
    if not throttle:
        rundown = 0.0
    active = throttle and state.responsive
    rc = float(m.charge(theta))
    rl = float(m.loss(theta))
    x, on, rd, on_time, _ = _advance(
        np.array([state.x]), np.array([state.on]), np.array([rc]), np.array([rl]),
        np.array([active]), np.array([rundown / 60.0 if active else 0.0]), dt / 60.0)
    new = replace(state, x=float(x[0]), on=bool(on[0]), throttled=throttle,
                  rundown_remaining=float(rd[0]) * 60.0)
    return new, m.p_r * float(on_time[0]) / (dt / 60.0)


def natural_phase(rc: np.ndarray, rl: np.ndarray, u: np.ndarray):
    """Map uniform draws ``u`` in [0, 1) to (x, on) along the natural cycle."""
    x = np.empty_like(u)
    on = np.zeros(len(u), dtype=bool)
    for i, (c, l, v) in enumerate(zip(rc, rl, u)):
        if l <= 0:
            x[i], on[i] = v, False
        elif c <= l:
            x[i], on[i] = v, True
        else:
            d_off = 1.0 / l
            d_on = 1.0 / (c - l)
            t = v * (d_off + d_on)
            if t < d_off:
                x[i], on[i] = 1.0 - l * t, False
            else:
                x[i], on[i] = (c - l) * (t - d_off), True
    return x, on


@dataclass(frozen=True)
class SimEvent:
    t_h: float  # hours since run start
    building_id: str
    kind: str  # on, off, throttle, ignore, release


@dataclass(frozen=True, eq=False)
class SimResult:
    t0: datetime
    step_s: float
    building_ids: tuple
    aggregate_power: np.ndarray
    per_building_power: np.ndarray | None
    events_log: tuple
    responsive: dict  # building id -> bool, throttled group only
    on_at_throttle: dict  # building id -> running when the throttle arrived
    onset_at_release: dict  # building id -> switched on at its release step

    def times(self) -> list[datetime]:
        return [self.t0 + timedelta(seconds=k * self.step_s) for k in range(len(self.aggregate_power))]


def _rates(pop: Population, theta: float):
    rc = np.array([float(m.charge(theta)) for m in pop.members])
    rl = np.array([float(m.loss(theta)) for m in pop.members])
    return rc, rl


def run(pop: Population, plan: DREventPlan | None, theta: TemperatureSeries, duration: float,
        seed=0, dt: float = DEFAULT_DT_MIN, report_s: float = DEFAULT_REPORT_S,
        keep_per_building: bool = False, keep_events: bool = True,
        persistent_nonresponse: bool = False) -> SimResult:
    """Simulate ``duration`` hours from the start of ``theta``.

    Units start at uniformly random phases of their natural cycle at the
    initial temperature. Equal inputs and seed give bit-identical output.
    """
    dt_h = dt / 60.0
    n_steps = int(round(duration / dt_h))
    sub = report_s / (dt * 60.0)
    if abs(sub - round(sub)) > 1e-9 or sub < 1:
        raise ValueError("dt must divide the reporting step")
    sub = int(round(sub))
    if n_steps % sub:
        raise ValueError("duration must be a whole number of reporting steps")
    if theta.duration_h < duration - 1e-9:
        raise CoverageError("temperature series shorter than the simulated duration")
    H = len(pop)
    ids = tuple(pop.ids)
    p_r = pop.p_r
    g_phase, g_resp, g_rd, _ = _streams(seed)

    theta_slot = -1
    rc, rl = _rates(pop, float(theta.theta[0]))
    x, on = natural_phase(rc, rl, g_phase.random(H))

    in_group = np.zeros(H, dtype=bool)
    start_k = rel_k = None
    responsive = np.ones(H, dtype=bool)
    rundown_draw = np.zeros(H)
    if plan is not None:
        in_group = np.array([b in plan.group for b in ids])
        start_h = (plan.t_start - theta.t0).total_seconds() / 3600.0
        start_k = int(math.ceil(start_h / dt_h - 1e-9))
        rel_k = np.full(H, -1)
        for i, b in enumerate(ids):
            if in_group[i]:
                rel_h = (plan.release_times[b] - theta.t0).total_seconds() / 3600.0
                rel_k[i] = int(math.ceil(rel_h / dt_h - 1e-9))
        # draw for every member so stream use does not depend on the group
        if persistent_nonresponse:
            g_persist = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
            responsive = g_persist.random(H) < pop.sigma_red
        else:
            responsive = g_resp.random(H) < pop.sigma_red
        rundown_draw = g_rd.uniform(*RUNDOWN_MIN, size=H) / 60.0

    throttled = np.zeros(H, dtype=bool)
    rundown = np.zeros(H)
    n_rep = n_steps // sub
    agg = np.zeros(n_rep)
    per = np.zeros((H, n_rep)) if keep_per_building else None
    log: list[SimEvent] = []
    on_at_throttle = np.zeros(H, dtype=bool)
    onset = np.zeros(H, dtype=bool)

    for k in range(n_steps):
        t_h = k * dt_h
        slot = int((t_h + 1e-9) // theta.step_h)
        if slot != theta_slot:
            theta_slot = slot
            rc, rl = _rates(pop, float(theta.theta[slot]))
        if plan is not None:
            if k == start_k:
                throttled = in_group.copy()
                on_at_throttle = on.copy()
                rundown = np.where(throttled & responsive & on, rundown_draw, 0.0)
                if keep_events:
                    for i in np.flatnonzero(in_group):
                        log.append(SimEvent(t_h, ids[i], "throttle" if responsive[i] else "ignore"))
            released = throttled & (rel_k <= k) & (k >= start_k)
            if released.any():
                throttled = throttled & ~released
                rundown = np.where(released, 0.0, rundown)
                if keep_events:
                    for i in np.flatnonzero(released):
                        log.append(SimEvent(t_h, ids[i], "release"))
        active = throttled & responsive
        x, on, rundown, on_time, switches = _advance(x, on, rc, rl, active, np.where(active, rundown, 0.0), dt_h)
        if plan is not None and released.any():
            for off, i, new_on in switches:
                if released[i] and responsive[i] and new_on and off == 0.0:
                    onset[i] = True
        if keep_events:
            for off, i, new_on in sorted(switches):
                log.append(SimEvent(t_h + off, ids[i], "on" if new_on else "off"))
        energy = p_r * on_time  # kWh in this step
        r = k // sub
        agg[r] += energy.sum()
        if per is not None:
            per[:, r] += energy
    rep_h = report_s / 3600.0
    agg /= rep_h
    if per is not None:
        per /= rep_h
        per.setflags(write=False)
    agg.setflags(write=False)
    grp = np.flatnonzero(in_group)
    return SimResult(t0=theta.t0, step_s=report_s, building_ids=ids, aggregate_power=agg,
                     per_building_power=per, events_log=tuple(log),
                     responsive={ids[i]: bool(responsive[i]) for i in grp},
                     on_at_throttle={ids[i]: bool(on_at_throttle[i]) for i in grp},
                     onset_at_release={ids[i]: bool(onset[i]) for i in grp})


def write_aggregate_csv(path, res: SimResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_iso", "aggregate_kw"])
        for t, p in zip(res.times(), res.aggregate_power):
            w.writerow([format_timestamp(t), f"{p:.6f}"])


def write_events_log_csv(path, res: SimResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t_iso", "t_h", "building_id", "event"])
        for e in res.events_log:
            w.writerow([format_timestamp(res.t0 + timedelta(hours=e.t_h)), f"{e.t_h:.9f}", e.building_id, e.kind])


def write_group_csvs(controlled_path, reference_path, res: SimResult, group) -> None:
    """Aggregate power of the throttled group and of everyone else."""
    if res.per_building_power is None:
        raise ValueError("run with keep_per_building=True to split groups")
    mask = np.array([b in group for b in res.building_ids])
    for path, sel in ((controlled_path, mask), (reference_path, ~mask)):
        p = res.per_building_power[sel].sum(axis=0)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_iso", "aggregate_kw"])
            for t, v in zip(res.times(), p):
                w.writerow([format_timestamp(t), f"{v:.6f}"])


def read_power_csv(path):
    """Read a ``t_iso,aggregate_kw`` file back into a PowerSeries."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["t_iso", "aggregate_kw"]:
        raise ParseError(f"{path}: expected header t_iso,aggregate_kw")
    rows = [r for r in rows[1:] if r]
    if len(rows) < 2:
        raise ParseError(f"{path}: need at least 2 rows")
    ts = [parse_timestamp(r[0]) for r in rows]
    step = (ts[1] - ts[0]).total_seconds()
    for a, b in zip(ts, ts[1:]):
        if abs((b - a).total_seconds() - step) > 1e-6:
            raise ParseError(f"{path}: irregular time grid at {b}")
    try:
        p = [float(r[1]) for r in rows]
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: bad power value") from exc
    return PowerSeries(t0=ts[0], step_s=step, p=p)
