"""Aggregate load-reduction and rebound predictions for a set of buildings."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .thermal_id import BuildingModel, duty_cycle, max_throttle_duration

SIGMA_RED = 0.88
T_TOL = 1e-12  # hours; keeps the inclusive T_max >= T test robust to rounding


@dataclass(frozen=True, eq=False)
class Population:
    members: tuple[BuildingModel, ...]
    sigma_red: float = SIGMA_RED
    sigma_reb: float | None = None  # defaults to sigma_red
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        ids = [m.building_id for m in members]
        if len(set(ids)) != len(ids):
            raise ValueError("building ids must be unique")
        if self.sigma_reb is None:
            object.__setattr__(self, "sigma_reb", self.sigma_red)
        for name in ("sigma_red", "sigma_reb"):
            s = getattr(self, name)
            if not 0 < s <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {s}")
        object.__setattr__(self, "_index", {m.building_id: m for m in members})

    def __len__(self):
        return len(self.members)

    def __getitem__(self, building_id: str) -> BuildingModel:
        return self._index[building_id]

    @property
    def ids(self) -> list[str]:
        return [m.building_id for m in self.members]

    @property
    def p_r(self) -> np.ndarray:
        return np.array([m.p_r for m in self.members])

    def subset(self, ids) -> "Population":
        ids = set(ids)
        return Population(tuple(m for m in self.members if m.building_id in ids),
                          self.sigma_red, self.sigma_reb)

    def to_dict(self) -> dict:
        return {"sigma_red": self.sigma_red, "sigma_reb": self.sigma_reb,
                "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "Population":
        return cls(tuple(BuildingModel.from_dict(x) for x in d["members"]),
                   sigma_red=float(d.get("sigma_red", SIGMA_RED)),
                   sigma_reb=None if d.get("sigma_reb") is None else float(d["sigma_reb"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Population":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True, eq=False)
class _Snapshot:
    """Per-member quantities at one temperature."""

    p_r: np.ndarray
    d_c: np.ndarray
    r_l: np.ndarray
    t_max: np.ndarray


def _snapshot(pop: Population, theta: float) -> _Snapshot:
    ms = pop.members
    return _Snapshot(
        p_r=np.array([m.p_r for m in ms]),
        d_c=np.array([duty_cycle(m, theta) for m in ms], dtype=float),
        r_l=np.array([float(m.loss_rate(theta)) for m in ms]),
        t_max=np.array([max_throttle_duration(m, theta) for m in ms], dtype=float),
    )


def _eligible(s: _Snapshot, T: float) -> np.ndarray:
    return s.t_max >= T - T_TOL


def throttle_set(pop: Population, theta: float, T: float) -> set[str]:
    if T < 0:
        raise ValueError("throttle duration must be non-negative")
    mask = _eligible(_snapshot(pop, theta), T)
    return {m.building_id for m, ok in zip(pop.members, mask) if ok}


def _reduction(pop, s, T):
    return pop.sigma_red * float(np.sum((s.p_r * s.d_c)[_eligible(s, T)]))


def _rebound(pop, s, T, clamp):
    prob = T * s.r_l
    if clamp:
        prob = np.minimum(1.0, prob)
    return pop.sigma_reb * float(np.sum((prob * (1 - s.d_c) * s.p_r)[_eligible(s, T)]))


def expected_reduction(pop: Population, theta: float, T: float) -> float:
    """sigma_red * sum of p_r * d_c(theta) over the throttle set, in kW."""
    if T < 0:
        raise ValueError("throttle duration must be non-negative")
    return _reduction(pop, _snapshot(pop, theta), T)


def expected_rebound(pop: Population, theta: float, T: float, clamp: bool = True) -> float:
    """Expected excess power right after release, in kW.

    Each throttled unit restarts with probability T * r_l(theta), capped at 1
    unless ``clamp`` is False (audit mode), and adds (1 - d_c) * p_r.
    """
    if T < 0:
        raise ValueError("throttle duration must be non-negative")
    return _rebound(pop, _snapshot(pop, theta), T, clamp)


@dataclass(frozen=True, eq=False)
class ResponseSurface:
    theta_grid: np.ndarray
    T_grid: np.ndarray
    values: np.ndarray  # shape (len(T_grid), len(theta_grid))


def response_surfaces(pop: Population, theta_grid, T_grid, clamp: bool = True):
    """Reduction and rebound surfaces plus the best temperature per T.

    The argmax breaks ties toward the warmer temperature.
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    T_grid = np.asarray(T_grid, dtype=float)
    if len(theta_grid) == 0 or len(T_grid) == 0:
        raise ValueError("grids must be non-empty")
    if np.any(np.diff(theta_grid) < 0) or np.any(np.diff(T_grid) < 0):
        raise ValueError("grids must be sorted")
    if np.any(T_grid < 0):
        raise ValueError("throttle durations must be non-negative")
    red = np.empty((len(T_grid), len(theta_grid)))
    reb = np.empty_like(red)
    for j, th in enumerate(theta_grid):
        s = _snapshot(pop, th)
        for i, T in enumerate(T_grid):
            red[i, j] = _reduction(pop, s, T)
            reb[i, j] = _rebound(pop, s, T, clamp)
    # last index of the maximum = warmest among ties
    rev = red[:, ::-1]
    arg = len(theta_grid) - 1 - np.argmax(rev, axis=1)
    return (ResponseSurface(theta_grid, T_grid, red),
            ResponseSurface(theta_grid, T_grid, reb),
            theta_grid[arg])


def write_surface_csv(path, red: ResponseSurface, reb: ResponseSurface) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["theta_c", "T_h", "reduction_kw", "rebound_kw"])
        for i, T in enumerate(red.T_grid):
            for j, th in enumerate(red.theta_grid):
                w.writerow([f"{th:g}", f"{T:g}", f"{red.values[i, j]:.6f}", f"{reb.values[i, j]:.6f}"])
