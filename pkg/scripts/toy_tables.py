"""Convergence and length-versus-energy tables on the toy surfaces.

    python3 scripts/toy_tables.py --out out/toy
"""
import argparse
import math
from pathlib import Path

import numpy as np

from viscoshape.toyman import (bump, sphere, sphere_exp, spherical_excess, toy_length_energy_shortcut,
                               toy_log_exp_convergence, toy_transport_holonomy, write_table)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/toy")
    ap.add_argument("--angle", type=float, default=math.pi / 4)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    S = sphere()
    a = np.array([0.0, 0.1])
    t = S.jac(a) @ np.array([1.0, 0.4])
    b = S.project(sphere_exp(S.f(a), args.angle * t / np.linalg.norm(t)))
    conv = toy_log_exp_convergence(a, b, S)
    write_table(out / "sphere_convergence.csv", conv)

    short = toy_length_energy_shortcut(bump(), [0.35, 0.5], [0.65, 0.5])
    write_table(out / "bump_shortcut.csv", short)

    holo = []
    for s in (0.3, 0.45, 0.6, 0.7):
        tri = [np.array([0.0, 0.0]), np.array([s, 0.0]), np.array([s / 2, 0.9 * s])]
        holo.append(dict(size=s, excess=spherical_excess(*(S.f(p) for p in tri)),
                         holonomy=abs(toy_transport_holonomy(S, tri))))
    write_table(out / "sphere_holonomy.csv", holo)

    for name, rows in (("convergence", conv), ("shortcut", short), ("holonomy", holo)):
        print(name)
        for r in rows:
            print("  " + "  ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


if __name__ == "__main__":
    main()
