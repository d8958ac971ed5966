"""Transport a serif variation along the geodesic from an upright to a slanted letter.

    python3 scripts/transport_demo.py
"""
import argparse

import numpy as np

from viscoshape.energy import MaterialParams
from viscoshape.geodesic import SolverConfig, minimize_path
from viscoshape.logexp import ShapeVariation, exp_1
from viscoshape.shapes import letter
from viscoshape.transport import TransportJob, transport_path


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=5)
    ap.add_argument("-K", type=int, default=4)
    args = ap.parse_args()
    p = MaterialParams()
    a, b = letter(args.level, "L"), letter(args.level, "L", slant=0.25)
    d = a.mesh.coords - [0.37, 0.8]
    v = ShapeVariation(a, 0.08 * np.exp(-np.sum(d ** 2, axis=1) / 0.1 ** 2)[:, None] * [0.0, 1.0])
    cfg = SolverConfig(schedule=((args.level - 1, max(1, args.K // 2)), (args.level, args.K)))
    geo = minimize_path(a, b, cfg, p)
    job = TransportJob.from_geodesic(geo.path, v)
    out = transport_path(job, SolverConfig(), p)
    print(f"rungs: {len(job.rungs)}")
    print(f"area added at the source: {exp_1(v).area() - a.area():.5f}")
    print(f"area added at the target: {exp_1(out).area() - b.area():.5f}")


if __name__ == "__main__":
    main()
