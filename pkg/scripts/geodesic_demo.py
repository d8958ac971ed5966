"""Geodesic between a disk and an ellipse, written as frames and heat maps.

    python3 scripts/geodesic_demo.py --out out/geodesic
"""
import argparse
import tempfile
from pathlib import Path

from viscoshape.cli import run
from viscoshape.fem import mask_to_image
from viscoshape.io import write_image
from viscoshape.shapes import disk, ellipse


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/geodesic")
    ap.add_argument("-K", type=int, default=4)
    ap.add_argument("--levels", default="4..5")
    args = ap.parse_args()
    hi = int(args.levels.split("..")[-1])
    with tempfile.TemporaryDirectory() as tmp:
        src, tgt = Path(tmp) / "a.pgm", Path(tmp) / "b.pgm"
        write_image(src, mask_to_image(disk(hi, radius=0.2)))
        write_image(tgt, mask_to_image(ellipse(hi, axes=(0.28, 0.16))))
        rc = run(["geodesic", "--source", str(src), "--target", str(tgt), "-K", str(args.K),
                  "--levels", args.levels, "--out", args.out])
    print(f"exit code {rc}, frames in {args.out}")
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
