"""Tabulate post-hoc and on-the-fly node-seconds over a range of output counts.

Usage: python3 scripts/cost_table.py [--t-c 40] [--timing configs/timings.csv] [--max-n 60]
"""
import argparse

from layoutlab.costmodel import (ASYMPTOTIC, CostParams, breakeven_outputs, feasible_tc_interval, load_table,
                                 u_onthefly, u_posthoc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-c", default="40")
    ap.add_argument("--timing", default=None)
    ap.add_argument("--max-n", type=int, default=60)
    ap.add_argument("--step", type=int, default=5)
    args = ap.parse_args()

    P = CostParams(args.t_c, 256, 6, 2, 32, 256, 1, load_table(args.timing))
    print(f"t_c={P.t_c} d={P.d()} breakeven N={breakeven_outputs(P)}")
    fi = feasible_tc_interval(P, ASYMPTOTIC)
    print(f"asymptotic t_c window: blocking {fi.blocking}, non-blocking {fi.non_blocking}")
    print(f"{'N':>5} {'post-hoc':>12} {'on-the-fly':>12} {'winner':>11}")
    for N in [1, *range(args.step, args.max_n + 1, args.step)]:
        a, b = u_posthoc(P.with_(N=N)), u_onthefly(P.with_(N=N))
        print(f"{N:>5} {float(a.u):>12.1f} {float(b.u):>12.1f} {'on-the-fly' if b.u < a.u else 'post-hoc':>11}")


if __name__ == "__main__":
    main()
