"""Synthetic populations, winter temperatures and smart-meter data.

Meter data is produced by the simulator itself, so the detection and
identification stages can be checked against exactly known switch times
and rate functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .meter_ingest import MeterSeries, TemperatureSeries
from .population import SIGMA_RED, Population
from .simulate import run
from .thermal_id import BuildingModel, ChargeRateModel, LossRateModel

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)

# reference parameter set the synthetic buildings scatter around
A_L, B_L = -0.084, 1.722
A_C, B_C, C_C = -17.85, 473.26, 1.6262


@dataclass(frozen=True)
class PopulationSpec:
    n: int = 200
    p_r: tuple[float, float] = (1.5, 4.0)
    loss_scale: tuple[float, float] = (0.6, 1.0)
    zero_loss_theta: tuple[float, float] = (18.0, 22.0)
    charge_scale: tuple[float, float] = (1.2, 1.8)
    f: tuple[float, float] = (1.5, 5.0)
    sigma_red: float = SIGMA_RED


def synthetic_population(spec: PopulationSpec = PopulationSpec(), seed=0) -> Population:
    """Heterogeneous buildings scattered around the reference parameters."""
    rng = np.random.default_rng(seed)
    members = []
    for i in range(spec.n):
        a_l = A_L * rng.uniform(*spec.loss_scale)
        b_l = -a_l * rng.uniform(*spec.zero_loss_theta)
        c_c = C_C * rng.uniform(*spec.charge_scale)
        members.append(BuildingModel(
            building_id=f"b{i:04d}",
            p_r=float(rng.uniform(*spec.p_r)),
            loss=LossRateModel(float(a_l), float(b_l)),
            charge=ChargeRateModel(A_C, B_C, float(c_c)),
            f=float(rng.uniform(*spec.f)),
        ))
    return Population(tuple(members), sigma_red=spec.sigma_red)


def constant_temperature(theta: float, hours: float, t0: datetime = T0, step_s: float = 3600.0):
    n = int(np.ceil(hours * 3600.0 / step_s))
    return TemperatureSeries(t0=t0, step_s=step_s, theta=np.full(n, float(theta)))


def winter_temperature(days: float, seed=0, t0: datetime = T0, step_s: float = 3600.0,
                       mean: float = 2.5, seasonal: float = 9.0, diurnal: float = 3.0,
                       weather: float = 2.5, bounds=(-20.0, 20.0)) -> TemperatureSeries:
    """Outdoor temperature with a slow seasonal swing, a daily cycle and AR(1) weather."""
    rng = np.random.default_rng(seed)
    n = int(np.ceil(days * 86400.0 / step_s))
    t_h = np.arange(n) * step_s / 3600.0
    season = seasonal * np.cos(2 * np.pi * t_h / (days * 24.0))
    day = -diurnal * np.cos(2 * np.pi * (t_h - 3.0) / 24.0)
    # AR(1) with a ~2 day correlation time
    phi = np.exp(-step_s / (2 * 86400.0))
    w = np.empty(n)
    w[0] = rng.normal(0.0, weather)
    innov = rng.normal(0.0, weather * np.sqrt(1 - phi ** 2), size=n)
    for k in range(1, n):
        w[k] = phi * w[k - 1] + innov[k]
    theta = np.clip(mean + season + day + w, *bounds)
    return TemperatureSeries(t0=t0, step_s=step_s, theta=theta)


@dataclass(frozen=True, eq=False)
class SyntheticMeter:
    meter: MeterSeries
    hp_power: np.ndarray  # kW, heat pump only, on the meter grid
    on_times: np.ndarray  # exact switch-on times, hours since t0
    off_times: np.ndarray


def synthesize_meters(pop: Population, theta: TemperatureSeries, days: float, seed=0,
                      noise_kw=0.2, base_kw=(0.2, 0.8), base_swing_kw=0.3,
                      step_s: float = 300.0) -> list[SyntheticMeter]:
    """Whole-building meters: heat pump + smooth base load + white noise.

    ``noise_kw`` is a scalar or one value per building (std of the
    interval power noise). Power is floored at 0 before cumulating so the
    register stays monotone.
    """
    hours = days * 24.0
    res = run(pop, None, theta, hours, seed=seed, dt=step_s / 60.0, report_s=step_s,
              keep_per_building=True, keep_events=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(6)[5])
    n_rep = res.per_building_power.shape[1]
    t_h = np.arange(n_rep) * step_s / 3600.0
    noise = np.broadcast_to(np.asarray(noise_kw, dtype=float), (len(pop),))
    switches: dict[str, tuple[list, list]] = {b: ([], []) for b in pop.ids}
    for e in res.events_log:
        if e.kind == "on":
            switches[e.building_id][0].append(e.t_h)
        elif e.kind == "off":
            switches[e.building_id][1].append(e.t_h)
    out = []
    for i, bid in enumerate(pop.ids):
        hp = res.per_building_power[i]
        base = rng.uniform(*base_kw) + base_swing_kw * 0.5 * (1 + np.sin(
            2 * np.pi * (t_h / 24.0 + rng.uniform())))
        p = np.maximum(hp + base + rng.normal(0.0, noise[i], size=n_rep), 0.0)
        e = np.concatenate(([0.0], np.cumsum(p * step_s / 3600.0))) + rng.uniform(1e3, 5e4)
        out.append(SyntheticMeter(
            meter=MeterSeries(t0=theta.t0, step_s=step_s, building_id=bid, e=e),
            hp_power=np.array(hp),
            on_times=np.array(switches[bid][0]),
            off_times=np.array(switches[bid][1]),
        ))
    return out
