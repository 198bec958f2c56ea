"""Write the bundled demo: 200 synthetic buildings and a 1 h throttle.

Creates, under the target directory:
  population.json               synthetic heterogeneous population
  scenario_dt0.json             simultaneous release
  scenario_dt45.json            release spread over 45 min
  meters/*.csv, temperature.csv a few synthetic smart meters for `identify`
  config.json                   run configuration pointing at the above

Usage: python scripts/make_demo.py [DIR] [--seed N]
"""
import argparse
import json
from pathlib import Path

from hpflex import synth
from hpflex.meter_ingest import write_meter_csv, write_temperature_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("dir", nargs="?", default="demo")
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--meters", type=int, default=3)
    ap.add_argument("--meter-days", type=float, default=30.0)
    args = ap.parse_args()
    out = Path(args.dir)
    (out / "meters").mkdir(parents=True, exist_ok=True)

    pop = synth.synthetic_population(synth.PopulationSpec(n=200), seed=args.seed)
    pop.save(out / "population.json")
    for name, dT in (("scenario_dt0", 0.0), ("scenario_dt45", 0.75)):
        sc = {"population": "population.json", "theta_c": 2.0, "duration_h": 14.0, "seed": args.seed,
              "plan": {"t_start_h": 9.0, "T_h": 1.0, "delta_T_h": dT, "theta_forecast_c": 2.0,
                       "group": "eligible", "group_fraction": 0.5}}
        (out / f"{name}.json").write_text(json.dumps(sc, indent=2) + "\n", encoding="utf-8")

    theta = synth.winter_temperature(args.meter_days, seed=args.seed + 1)
    write_temperature_csv(out / "temperature.csv", theta)
    meter_pop = synth.synthetic_population(synth.PopulationSpec(n=args.meters), seed=args.seed + 2)
    for sm in synth.synthesize_meters(meter_pop, theta, args.meter_days, seed=args.seed + 3):
        write_meter_csv(out / "meters" / f"{sm.meter.building_id}.csv", sm.meter)

    cfg = {"paths": {"meter_dir": "meters", "temperature": "temperature.csv",
                     "model_store": "models", "out_dir": "out"},
           "detection": {"min_on_h": 10 / 60, "min_off_h": 10 / 60},
           "population": {"default_f": 3.0}}
    (out / "config.json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")
    print(f"demo written to {out}/")


if __name__ == "__main__":
    main()
