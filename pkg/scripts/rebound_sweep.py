"""Peak rebound vs release spread, and predicted response surfaces.

Simulates a synthetic population throttled for T hours at a fixed outdoor
temperature, once per release spread, against an identically seeded
free-running twin. Prints the predicted reduction/rebound surface first.

Usage: python scripts/rebound_sweep.py [--n 500] [--theta 5] [--T 1] [--seed 0]
"""
import argparse
from datetime import timedelta

import numpy as np

from hpflex.population import expected_rebound, expected_reduction, response_surfaces, throttle_set
from hpflex.simulate import plan_release, run
from hpflex.synth import T0, PopulationSpec, constant_temperature, synthetic_population


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--theta", type=float, default=5.0)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    pop = synthetic_population(PopulationSpec(n=args.n), seed=args.seed)

    th, Ts = np.arange(-10.0, 16.0, 5.0), np.array([0.25, 0.5, 1.0, 2.0])
    red, reb, arg = response_surfaces(pop, th, Ts)
    print("predicted reduction kW (rows T_h, cols theta_c)")
    print("T\\theta " + " ".join(f"{t:7.0f}" for t in th))
    for i, T in enumerate(Ts):
        print(f"{T:7.2f} " + " ".join(f"{v:7.1f}" for v in red.values[i]) + f"   best theta {arg[i]:g}")

    group = sorted(throttle_set(pop, args.theta, args.T))
    start, dur = T0 + timedelta(hours=2), 2 + args.T + 4
    temp = constant_temperature(args.theta, dur + 1)
    print(f"\n{len(group)} of {len(pop)} eligible at theta={args.theta:g} T={args.T:g}; "
          f"predicted reduction {expected_reduction(pop, args.theta, args.T):.1f} kW, "
          f"rebound {expected_rebound(pop, args.theta, args.T):.1f} kW")
    k = int(round((2 + args.T) * 12))
    for dT in (0.0, 0.25, 0.5, 0.75, 1.0):
        plan = plan_release(pop, group, start, args.T, dT, args.theta, seed=args.seed)
        ctl = run(pop, plan, temp, dur, seed=args.seed, keep_events=False)
        twin = run(pop, None, temp, dur, seed=args.seed, keep_events=False)
        dev = ctl.aggregate_power - twin.aggregate_power
        print(f"spread {60 * dT:3.0f} min: peak rebound {dev[k:].max():7.1f} kW")


if __name__ == "__main__":
    main()
