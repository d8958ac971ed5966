"""Log then Exp between an upright and a slanted letter.

    python3 scripts/round_trip.py --level 6
"""
import argparse
import time

from viscoshape.energy import MaterialParams
from viscoshape.geodesic import SolverConfig
from viscoshape.logexp import exp_k, log_K, symmetric_difference
from viscoshape.shapes import letter


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=6)
    ap.add_argument("-K", type=int, default=4)
    ap.add_argument("--char", default="L")
    ap.add_argument("--slant", type=float, default=0.25)
    args = ap.parse_args()
    a = letter(args.level, args.char)
    b = letter(args.level, args.char, slant=args.slant)
    cfg = SolverConfig(schedule=((args.level - 1, max(1, args.K // 2)), (args.level, args.K)))
    t = time.perf_counter()
    v = log_K(a, b, args.K, cfg, MaterialParams())
    out = exp_k(v, args.K)[-1]
    rel = symmetric_difference(out, b) / b.area()
    print(f"symmetric difference {100 * rel:.2f}% of target area in {time.perf_counter() - t:.0f} s")


if __name__ == "__main__":
    main()
