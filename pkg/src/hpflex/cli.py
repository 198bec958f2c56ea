"""Command-line front end: identify, flex, predict, simulate, evaluate.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import baseline_eval, flexibility, population, simulate
from .errors import ConfigError, DataError, HpflexError
from .meter_ingest import _Grid, align_temperature, load_meter_csv, load_temperature_csv, parse_timestamp
from .synth import constant_temperature
from .thermal_id import BuildingModel, identify_building

log = logging.getLogger("hpflex")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


# -- configuration ---------------------------------------------------------

@dataclass
class PathsConfig:
    meter_dir: str | None = None
    temperature: str | None = None
    model_store: str | None = None
    out_dir: str = "out"


@dataclass
class DetectionConfig:
    min_on_h: float = 0.25
    min_off_h: float = 0.25


@dataclass
class FitConfig:
    huber_c: float = 1.345
    max_iter: int = 50
    min_phase_h: float = 10 / 60


@dataclass
class PopulationConfig:
    sigma_red: float = population.SIGMA_RED
    sigma_reb: float | None = None
    default_f: float = 1.0


@dataclass
class SimConfig:
    seed: int = 0
    dt_min: float = 1.0


@dataclass
class HorizonConfig:
    N: int = 144
    t_s_min: float = 5.0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        sections = {f.name: f.default_factory for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, factory in sections.items():
            proto = factory()
            vals = d.get(name, {})
            if not isinstance(vals, dict):
                raise ConfigError(f"section {name!r} must be an object")
            allowed = {f.name for f in fields(proto)}
            bad = set(vals) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kw[name] = type(proto)(**{**asdict(proto), **vals})
        cfg = cls(**kw)
        for key in ("meter_dir", "temperature", "model_store", "out_dir"):
            v = getattr(cfg.paths, key)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg.paths, key, str(base / v))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        try:
            need(self.detection.min_on_h >= 0 and self.detection.min_off_h >= 0,
                 "detection minimum durations must be >= 0")
            need(self.fit.huber_c > 0, "fit.huber_c must be positive")
            need(int(self.fit.max_iter) >= 1, "fit.max_iter must be >= 1")
            need(self.fit.min_phase_h >= 0, "fit.min_phase_h must be >= 0")
            need(0 < self.population.sigma_red <= 1, "population.sigma_red must lie in (0, 1]")
            need(self.population.sigma_reb is None or 0 < self.population.sigma_reb <= 1,
                 "population.sigma_reb must lie in (0, 1]")
            need(self.population.default_f >= 1, "population.default_f must be >= 1")
            need(self.sim.dt_min > 0, "sim.dt_min must be positive")
            need(int(self.horizon.N) >= 1, "horizon.N must be >= 1")
            need(self.horizon.t_s_min > 0, "horizon.t_s_min must be positive")
        except TypeError as exc:
            raise ConfigError(f"non-numeric config value: {exc}") from None
        for key in ("meter_dir", "temperature"):
            v = getattr(self.paths, key)
            if v is not None and not Path(v).exists():
                raise ConfigError(f"paths.{key} does not exist: {v}")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(d, base=p.parent)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_population(cfg: RunConfig) -> population.Population:
    store = cfg.paths.model_store
    if store is None or not Path(store).is_dir():
        raise ConfigError(f"model store not found: {store}")
    files = sorted(Path(store).glob("*.json"))
    if not files:
        raise ConfigError(f"model store {store} is empty")
    members = tuple(BuildingModel.load(f) for f in files)
    return population.Population(members, cfg.population.sigma_red, cfg.population.sigma_reb)


# -- identify --------------------------------------------------------------

def _identify_one(task):
    path, temp_path, kw = task
    bid = Path(path).stem
    stage = "ingest"
    try:
        meter = load_meter_csv(path, building_id=bid)
        theta = load_temperature_csv(temp_path)
        stage = "identify"
        model = identify_building(meter, theta, **kw)
        return bid, model.to_dict(), None, None
    except (HpflexError, ValueError, ArithmeticError) as exc:
        # the detection errors name their stage
        name = type(exc).__name__
        if name in ("DegenerateClusterError", "EmptySetError", "LengthError"):
            stage = "detect"
        elif stage == "identify":
            stage = "fit"
        return bid, None, stage, f"{name}: {exc}"


def cmd_identify(cfg: RunConfig, args) -> int:
    meter_dir = args.meter_dir or cfg.paths.meter_dir
    temp = args.temperature or cfg.paths.temperature
    store = args.model_store or cfg.paths.model_store
    if meter_dir is None or not Path(meter_dir).is_dir():
        raise ConfigError(f"meter directory not found: {meter_dir}")
    if temp is None or not Path(temp).is_file():
        raise ConfigError(f"temperature file not found: {temp}")
    if store is None:
        raise ConfigError("no model store configured")
    Path(store).mkdir(parents=True, exist_ok=True)
    load_temperature_csv(temp)  # fail fast on a bad shared input
    f = args.f if args.f is not None else cfg.population.default_f
    kw = dict(f=f, min_on=cfg.detection.min_on_h, min_off=cfg.detection.min_off_h,
              min_phase_h=cfg.fit.min_phase_h, huber_c=cfg.fit.huber_c, max_iter=int(cfg.fit.max_iter))
    tasks = [(str(p), temp, kw) for p in sorted(Path(meter_dir).glob("*.csv"))]
    if args.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_identify_one, tasks))
    else:
        results = [_identify_one(t) for t in tasks]
    skipped = []
    for bid, model, stage, err in results:
        if model is None:
            log.warning("skipped %s at %s: %s", bid, stage, err)
            skipped.append({"building_id": bid, "stage": stage, "error": err})
            continue
        _write_json(Path(store) / f"{bid}.json", model)
    _write_json(_out_dir(cfg) / "skip_report.json", {"n_buildings": len(results), "skipped": skipped})
    print(f"identified {len(results) - len(skipped)} of {len(results)} buildings, {len(skipped)} skipped")
    return EXIT_OK


# -- flex ------------------------------------------------------------------

def cmd_flex(cfg: RunConfig, args) -> int:
    store = args.model_store or cfg.paths.model_store
    path = Path(store or ".") / f"{args.building}.json"
    if store is None or not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    m = BuildingModel.load(path)
    N = int(args.N if args.N is not None else cfg.horizon.N)
    t_s_min = args.t_s_min if args.t_s_min is not None else cfg.horizon.t_s_min
    t_s = t_s_min / 60.0
    if N < 1 or t_s <= 0:
        raise ConfigError("horizon needs N >= 1 and t_s > 0")
    if not 0 <= args.x0 <= 1:
        raise ConfigError("x0 must lie in [0, 1]")
    if args.forecast:
        fc = load_temperature_csv(args.forecast)
        start = parse_timestamp(args.start) if args.start else fc.t0
        th = align_temperature(fc, _Grid(t0=start, step_s=t_s * 3600.0), N).theta
    else:
        if args.theta is None:
            raise ConfigError("give --theta or --forecast")
        start = parse_timestamp(args.start or "1970-01-01T00:00:00Z")
        th = np.full(N, args.theta)
    h = flexibility.FlexHorizon(N, t_s, th)
    poly = flexibility.build_polytope(m, h, args.x0)
    env = flexibility.energy_envelope(poly)
    defer = flexibility.max_deferral(poly)
    out = _out_dir(cfg)
    flexibility.write_envelope_csv(out / f"envelope_{m.building_id}.csv", env, start, t_s)
    summary = {"building_id": m.building_id, "max_deferral_steps": defer, **poly.to_dict()}
    _write_json(out / f"polytope_{m.building_id}.json", summary)
    print(f"max_deferral={defer} steps ({defer * t_s_min:g} min)")
    return EXIT_OK


# -- predict ---------------------------------------------------------------

def parse_grid(text: str) -> np.ndarray:
    """'a', 'a,b,c' or 'lo:hi:step' (inclusive of hi)."""
    try:
        if ":" in text:
            lo, hi, st = (float(v) for v in text.split(":"))
            if st <= 0 or hi < lo:
                raise ValueError
            n = int(math.floor((hi - lo) / st + 1e-9)) + 1
            return lo + st * np.arange(n)
        return np.array(sorted(float(v) for v in text.split(",")))
    except ValueError:
        raise ConfigError(f"bad grid specification {text!r}") from None


def cmd_predict(cfg: RunConfig, args) -> int:
    if args.model_store:
        cfg.paths.model_store = args.model_store
    pop = _load_population(cfg)
    thetas = parse_grid(args.theta)
    Ts = parse_grid(args.T)
    if np.any(Ts < 0):
        raise ConfigError("throttle durations must be >= 0")
    red, reb, arg = population.response_surfaces(pop, thetas, Ts, clamp=not args.no_clamp)
    out = _out_dir(cfg)
    population.write_surface_csv(out / "surface.csv", red, reb)
    with open(out / "argmax.csv", "w", encoding="utf-8") as fh:
        fh.write("T_h,theta_c\n")
        for T, th in zip(Ts, arg):
            fh.write(f"{T:g},{th:g}\n")
    if red.values.size == 1:
        print(f"theta_c={thetas[0]:g} T_h={Ts[0]:g} reduction_kw={red.values[0, 0]:.3f} "
              f"rebound_kw={reb.values[0, 0]:.3f}")
    else:
        print(f"wrote {red.values.size} grid points to {out / 'surface.csv'}")
    return EXIT_OK


# -- simulate --------------------------------------------------------------

_SCENARIO_KEYS = {"population", "temperature", "theta_c", "duration_h", "seed", "dt_min", "plan"}
_PLAN_KEYS = {"t_start_h", "T_h", "delta_T_h", "theta_forecast_c", "group", "group_fraction"}


def _scenario(path: str) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    try:
        sc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(sc, dict) or "population" not in sc or "duration_h" not in sc:
        raise ConfigError(f"{path}: scenario needs 'population' and 'duration_h'")
    bad = set(sc) - _SCENARIO_KEYS
    if sc.get("plan") is not None:
        bad |= set(sc["plan"]) - _PLAN_KEYS
        if "T_h" not in sc["plan"] or "t_start_h" not in sc["plan"]:
            raise ConfigError(f"{path}: plan needs 't_start_h' and 'T_h'")
    if bad:
        raise ConfigError(f"{path}: unknown scenario keys {sorted(bad)}")
    if "temperature" not in sc and "theta_c" not in sc:
        raise ConfigError(f"{path}: scenario needs 'temperature' or 'theta_c'")
    return sc, p.parent


def _select_group(pop, plan_cfg: dict, theta: float, T: float, seed: int) -> list[str]:
    group = plan_cfg.get("group", "eligible")
    if isinstance(group, list):
        return sorted(str(g) for g in group)
    if group != "eligible":
        raise ConfigError("plan.group must be 'eligible' or a list of ids")
    ids = sorted(pop.ids)
    frac = float(plan_cfg.get("group_fraction", 1.0))
    if not 0 < frac <= 1:
        raise ConfigError("plan.group_fraction must lie in (0, 1]")
    if frac < 1:
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(8)[7])
        ids = sorted(rng.choice(ids, size=int(round(frac * len(ids))), replace=False).tolist())
    eligible = population.throttle_set(pop, theta, T)
    return [b for b in ids if b in eligible]


def cmd_simulate(cfg: RunConfig, args) -> int:
    sc, base = _scenario(args.scenario)
    pop_path = base / sc["population"]
    if not pop_path.is_file():
        raise ConfigError(f"population file not found: {pop_path}")
    pop = population.Population.load(pop_path)
    seed = args.seed if args.seed is not None else int(sc.get("seed", cfg.sim.seed))
    dt = float(sc.get("dt_min", cfg.sim.dt_min))
    duration = float(sc["duration_h"])
    if sc.get("temperature"):
        theta = load_temperature_csv(base / sc["temperature"])
    else:
        theta = constant_temperature(float(sc["theta_c"]), duration)
    plan = None
    pc = sc.get("plan")
    out = _out_dir(cfg)
    if pc is not None:
        T = float(pc["T_h"])
        th_fc = float(pc.get("theta_forecast_c", sc.get("theta_c", float(theta.theta[0]))))
        group = _select_group(pop, pc, th_fc, T, seed)
        if not group:
            raise DataError("no building is eligible for the requested throttle")
        t_start = theta.t0 + timedelta(hours=float(pc["t_start_h"]))
        plan = simulate.plan_release(pop, group, t_start, T, float(pc.get("delta_T_h", 0.0)), th_fc, seed)
        sub = pop.subset(group)
        preds = {"reduction_kw": population.expected_reduction(sub, th_fc, T),
                 "rebound_kw": population.expected_rebound(sub, th_fc, T),
                 "theta_c": th_fc, "T_h": T, "group_size": len(group)}
    res = simulate.run(pop, plan, theta, duration, seed=seed, dt=dt, keep_per_building=plan is not None)
    simulate.write_aggregate_csv(out / "aggregate.csv", res)
    simulate.write_events_log_csv(out / "events.csv", res)
    if plan is not None:
        simulate.write_group_csvs(out / "controlled.csv", out / "reference.csv", res, plan.group)
        _write_json(out / "plan.json", plan.to_dict())
        _write_json(out / "predictions.json", preds)
        _write_json(out / "event.json", {"controlled": "controlled.csv", "reference": "reference.csv",
                                         "plan": "plan.json", "predictions": "predictions.json"})
        print(f"throttled {len(plan.group)} of {len(pop)} buildings; predicted reduction "
              f"{preds['reduction_kw']:.1f} kW, rebound {preds['rebound_kw']:.1f} kW")
    else:
        print(f"simulated {len(pop)} buildings for {duration:g} h")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------

def _load_event(path: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"event file not found: {path}")
    try:
        spec = json.loads(p.read_text(encoding="utf-8"))
        ctrl = simulate.read_power_csv(p.parent / spec["controlled"])
        ref = simulate.read_power_csv(p.parent / spec["reference"])
        plan = simulate.DREventPlan.from_dict(json.loads((p.parent / spec["plan"]).read_text(encoding="utf-8")))
        pred = spec["predictions"]
        if isinstance(pred, str):
            pred = json.loads((p.parent / pred).read_text(encoding="utf-8"))
        return ctrl, ref, plan, (float(pred["reduction_kw"]), float(pred["rebound_kw"]))
    except (KeyError, TypeError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise ConfigError(f"{path}: bad event specification ({type(exc).__name__}: {exc})") from None


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    reports = []
    for path in args.events:
        ctrl, ref, plan, pred = _load_event(path)
        r = baseline_eval.score_event(ctrl, ref, plan, pred, post=args.post_h, lam=args.lam)
        reports.append(r)
        name = Path(path).parent.name if Path(path).name == "event.json" else Path(path).stem
        baseline_eval.write_report_json(out / f"report_{name}.json", r)
        print(f"{name}: reduction {r.realized_avg_reduction_kw:.1f} kW (pred {r.predicted_reduction_kw:.1f}, "
              f"APE {100 * r.ape_reduction:.1f}%), peak rebound {r.realized_peak_rebound_kw:.1f} kW "
              f"(pred {r.predicted_peak_rebound_kw:.1f}, APE {100 * r.ape_rebound:.1f}%)")
    baseline_eval.write_statistics_json(out / "statistics.json", baseline_eval.ape_statistics(reports))
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hpflex", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for per-building stages")
    ap.add_argument("--seed", type=int, help="override the simulation seed")
    ap.add_argument("--out-dir", help="output directory (overrides paths.out_dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", help="fit building models from meter data")
    p.add_argument("--meter-dir")
    p.add_argument("--temperature")
    p.add_argument("--model-store")
    p.add_argument("--f", type=float, help="flexibility factor written into each model")

    p = sub.add_parser("flex", help="feasible energy envelope of one building")
    p.add_argument("--building", required=True)
    p.add_argument("--x0", type=float, required=True, help="initial SOC in [0, 1]")
    p.add_argument("--N", type=int)
    p.add_argument("--t-s-min", type=float)
    p.add_argument("--theta", type=float, help="constant forecast temperature (C)")
    p.add_argument("--forecast", help="temperature CSV used as forecast")
    p.add_argument("--start", help="horizon start (ISO-8601)")
    p.add_argument("--model-store")

    p = sub.add_parser("predict", help="population reduction and rebound surfaces")
    p.add_argument("--theta", required=True, help="'a', 'a,b' or 'lo:hi:step' in C")
    p.add_argument("--T", required=True, help="'a', 'a,b' or 'lo:hi:step' in hours")
    p.add_argument("--no-clamp", action="store_true", help="do not cap T*r_l at 1 (audit)")
    p.add_argument("--model-store")

    p = sub.add_parser("simulate", help="run a throttle scenario")
    p.add_argument("scenario")

    p = sub.add_parser("evaluate", help="score realized events against predictions")
    p.add_argument("events", nargs="+")
    p.add_argument("--post-h", type=float, default=baseline_eval.POST_WINDOW_H)
    p.add_argument("--lam", type=float, default=baseline_eval.LAMBDA)
    return ap


COMMANDS = {"identify": cmd_identify, "flex": cmd_flex, "predict": cmd_predict,
            "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.out_dir:
            cfg.paths.out_dir = args.out_dir
        if args.seed is not None:
            cfg.sim.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"hpflex: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, HpflexError, ValueError, ArithmeticError) as exc:
        print(f"hpflex: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
