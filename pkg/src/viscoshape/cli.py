"""Command-line front end.

Subcommands::

    geodesic   --source A.pgm --target B.pgm -K 4 --levels 5..6 --out DIR
    log        --source A.pgm --target B.pgm -K 4 --out DIR
    exp        --variation DIR -K 4 --out DIR
    transport  --variation DIR (--source GEODESIC_DIR | --shape M0.pgm --shape M1.pgm ...) --out DIR
    morph      --source GEODESIC_DIR --texture T.pgm [--texture T_target.pgm] --out DIR

Exit codes: 0 success, 2 invalid input, 3 solver non-convergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .energy import MaterialParams
from .fem import (ShapeMask, eval_field, locate_deformed, mask_at_level, mask_to_image,
                  rasterize_mask)
from .geodesic import SolverConfig, dissipation_maps, minimize_path, write_energy_log
from .io import (load_variation, read_image, read_manifest, read_vfld, save_variation, write_image,
                 write_manifest, write_vfld)
from .logexp import ExpConfig, ShapeVariation, exp_k_subdivided, log_K
from .solvers import SolverError
from .transport import TransportJob, transport_path

log = logging.getLogger("viscoshape")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
BACKGROUND = 128

_MATERIAL_KEYS = {"lambda": "lam", "mu": "mu", "delta1": "delta1", "delta2": "delta2",
                  "delta3": "delta3", "epsilon": "epsilon"}
_SOLVER_KEYS = {"tol": float, "max_iter": int, "reset_threshold": float}


@dataclass(frozen=True)
class JobConfig:
    """Material and solver parameters plus the cascade and file locations."""

    params: MaterialParams = MaterialParams()
    solver: SolverConfig = SolverConfig()
    levels: Tuple[int, int] = (5, 6)
    K: int = 4
    source: Optional[Path] = None
    target: Optional[Path] = None
    out: Optional[Path] = None
    texture: Tuple[Path, ...] = ()
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.levels
        if not 2 <= lo <= hi:
            raise ValueError("levels must satisfy 2 <= L0 <= L1")
        if self.K < 1:
            raise ValueError("K must be positive")
        for p in (self.source, self.target, *self.texture):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"input file {p} does not exist")

    @property
    def level(self) -> int:
        return self.levels[1]

    def schedule(self) -> Tuple[Tuple[int, int], ...]:
        """One stage per level; K halves towards coarser levels when it is a power of two."""
        lo, hi = self.levels
        pow2 = self.K & (self.K - 1) == 0
        return tuple((lv, max(1, self.K >> (hi - lv)) if pow2 else self.K) for lv in range(lo, hi + 1))

    def solver_config(self) -> SolverConfig:
        return self.solver.with_schedule(self.schedule())


def parse_config_file(path) -> Tuple[MaterialParams, SolverConfig]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    mat, sol = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _MATERIAL_KEYS:
                mat[_MATERIAL_KEYS[key]] = float(value)
            elif key in _SOLVER_KEYS:
                sol[key] = _SOLVER_KEYS[key](value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return MaterialParams(**mat), SolverConfig(**sol)


def _parse_levels(text: str) -> Tuple[int, int]:
    parts = text.replace("..", " ").split()
    try:
        lv = tuple(int(s) for s in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level range {text!r}") from None
    if len(lv) == 1:
        return lv[0], lv[0]
    if len(lv) != 2:
        raise argparse.ArgumentTypeError(f"bad level range {text!r}")
    return lv


def load_mask(path, level: int) -> ShapeMask:
    return rasterize_mask(read_image(path), level, source=str(path))


def write_frames(out: Path, shapes: Sequence[ShapeMask], start: int = 0, prefix: str = "frame") -> None:
    out.mkdir(parents=True, exist_ok=True)
    for j, m in enumerate(shapes, start):
        write_image(out / f"{prefix}_{j:03d}.pgm", mask_to_image(m))


def heat_images(maps: List[np.ndarray], mesh) -> List[np.ndarray]:
    """Dissipation maps scaled by the largest value along the path."""
    peak = max((float(np.max(m)) for m in maps), default=0.0)
    scale = 255.0 / peak if peak > 0 else 0.0
    return [np.clip(mesh.grid(m) * scale, 0, 255).astype(np.uint8) for m in maps]


# ---------------------------------------------------------------------------
# commands

def cmd_geodesic(cfg: JobConfig) -> Path:
    """Discrete geodesic between two masks: frames, heat maps, energy log and matchings."""
    out = Path(cfg.out)
    O0, OK = load_mask(cfg.source, cfg.level), load_mask(cfg.target, cfg.level)
    scfg = cfg.solver_config()
    try:
        res = minimize_path(O0, OK, scfg, cfg.params)
    except SolverError as exc:
        diag = out / "failed"
        last = getattr(exc.iterate, "path", None)
        if last is not None:
            write_frames(diag, last.shapes())
        if exc.history:
            diag.mkdir(parents=True, exist_ok=True)
            write_energy_log(diag / "energy.csv", exc.history)
        raise SolverError(f"{exc} (diagnostics in {diag})", iterate=exc.iterate,
                          history=exc.history) from None
    path = res.path
    write_frames(out, path.shapes())
    for j, img in enumerate(heat_images(dissipation_maps(path, cfg.params), path.mesh), 1):
        write_image(out / f"heat_{j:03d}.pgm", img)
    write_energy_log(out / "energy.csv", res.history)
    maps = path.composed_maps()
    (out / "maps").mkdir(exist_ok=True)
    for j, m in enumerate(maps):
        write_vfld(out / "maps" / f"map_{j:03d}.vfld", path.level, m)
    write_image(out / "maps" / "ref.pgm", mask_to_image(path.refs[0]))
    bd = res.breakdown
    write_manifest(out / "manifest.json", kind="geodesic", level=path.level, K=path.K,
                   source=str(cfg.source), target=str(cfg.target), seed=cfg.seed,
                   total=float(bd.total), pair_energies=[float(w) for w in bd.pair],
                   penalty0=float(bd.penalty0), penaltyK=float(bd.penaltyK),
                   frames=[f"frame_{j:03d}.pgm" for j in range(path.K + 1)],
                   maps=[f"maps/map_{j:03d}.vfld" for j in range(path.K + 1)], ref="maps/ref.pgm")
    return out


def cmd_log(cfg: JobConfig) -> Path:
    O, Ot = load_mask(cfg.source, cfg.level), load_mask(cfg.target, cfg.level)
    v = log_K(O, Ot, cfg.K, cfg.solver_config(), cfg.params)
    save_variation(cfg.out, v)
    return Path(cfg.out)


def cmd_exp(cfg: JobConfig, variation: Path) -> Path:
    """Frames ``frame_001 .. frame_K`` of the discrete exponential flow."""
    v = load_variation(variation)
    shapes = exp_k_subdivided(v, cfg.K, ExpConfig(), cfg.params)
    write_frames(Path(cfg.out), shapes, start=1)
    return Path(cfg.out)


def _geodesic_dir(directory: Path):
    man = read_manifest(directory / "manifest.json")
    if man.get("kind") != "geodesic":
        raise ValueError(f"{directory} is not a geodesic output directory")
    level = int(man["level"])
    shapes = [load_mask(directory / f, level) for f in man["frames"]]
    maps = [read_vfld(directory / f)[1] for f in man["maps"]]
    ref = load_mask(directory / man["ref"], level)
    return man, shapes, maps, ref


def cmd_transport(cfg: JobConfig, variation: Path, shapes: Sequence[Path] = ()) -> Path:
    v = load_variation(variation)
    if cfg.source is not None and Path(cfg.source).is_dir():
        _, masks, maps, ref = _geodesic_dir(Path(cfg.source))
        job = TransportJob(masks, ShapeVariation(mask_at_level(v.base, masks[0].mesh.level), v.zeta),
                           ref, maps)
    else:
        masks = [load_mask(s, v.mesh.level) for s in shapes]
        job = TransportJob(masks, v)
    out = transport_path(job, cfg.solver_config(), cfg.params)
    save_variation(cfg.out, out)
    return Path(cfg.out)


def _sample_texture(tex: np.ndarray, pts: np.ndarray) -> np.ndarray:
    H, W = tex.shape
    return ndimage.map_coordinates(tex.astype(float), [pts[:, 1] * (H - 1), pts[:, 0] * (W - 1)],
                                   order=1, mode="nearest")


def morph_frames(maps: List[np.ndarray], ref: ShapeMask, source_tex: np.ndarray,
                 target_tex: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Textured frames along a path given the composed maps ``Phi_j`` over ``ref``.

    Frame ``j`` blends the pushforward of the source texture under
    ``Phi_j o Phi_0^-1`` and the pullback of the target texture under
    ``Phi_K o Phi_j^-1`` with weight ``j / K``; without a target texture the
    frames are plain pushforwards.  Outside ``O_j`` the frame is a neutral gray.
    """
    mesh = ref.mesh
    blend = target_tex is not None
    target_tex = source_tex if target_tex is None else target_tex
    H, W = source_tex.shape
    yy, xx = np.mgrid[0:H, 0:W]
    pix = np.column_stack([xx.ravel() / (W - 1), yy.ravel() / (H - 1)])
    K = len(maps) - 1
    frames = []
    for j, phi in enumerate(maps):
        tri, bary = locate_deformed(mesh, phi, pix)
        found = tri >= 0
        nodes = mesh.tris[tri[found]]
        ref_pts = np.einsum("mk,mkd->md", bary[found], mesh.coords[nodes])
        inside = np.zeros(len(pix), dtype=bool)
        inside[found] = np.einsum("mk,mk->m", bary[found], ref.values[nodes]) >= 0.5
        keep = inside[found]
        ref_pts = ref_pts[keep]
        push = _sample_texture(source_tex, eval_field(mesh, maps[0], ref_pts))
        pull = _sample_texture(target_tex, eval_field(mesh, maps[-1], ref_pts))
        w = j / K if (K and blend) else 0.0
        img = np.full(len(pix), float(BACKGROUND))
        img[inside] = (1 - w) * push + w * pull
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(H, W))
    return frames


def cmd_morph(cfg: JobConfig) -> Path:
    directory = Path(cfg.source)
    if not (directory / "manifest.json").exists():
        raise ValueError(f"{directory}: missing matchings (run the geodesic command first)")
    _, _, maps, ref = _geodesic_dir(directory)
    if not cfg.texture:
        raise ValueError("morph needs --texture")
    texs = [read_image(t) for t in cfg.texture[:2]]
    if len(texs) == 2 and texs[0].shape != texs[1].shape:
        raise ValueError("source and target textures differ in size")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, img in enumerate(morph_frames(maps, ref, texs[0], texs[1] if len(texs) > 1 else None)):
        write_image(out / f"frame_{j:03d}.pgm", img)
    return out


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="viscoshape", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=["geodesic", "log", "exp", "transport", "morph"])
    ap.add_argument("--source", type=Path)
    ap.add_argument("--target", type=Path)
    ap.add_argument("--shape", type=Path, action="append", default=[])
    ap.add_argument("--variation", type=Path)
    ap.add_argument("-K", type=int, default=4)
    ap.add_argument("--levels", type=_parse_levels, default=(5, 6), help="L0..L1")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--texture", type=Path, action="append", default=[])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


_REQUIRED = {"geodesic": ("source", "target"), "log": ("source", "target"), "exp": ("variation",),
             "transport": ("variation",), "morph": ("source",)}


def run(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        missing = [f"--{k}" for k in _REQUIRED[args.command] if getattr(args, k) is None]
        if missing:
            raise ValueError(f"{args.command} needs {', '.join(missing)}")
        if args.command == "transport" and args.source is None and len(args.shape) < 2:
            raise ValueError("transport needs --source GEODESIC_DIR or at least two --shape masks")
        params, solver = (parse_config_file(args.config) if args.config
                          else (MaterialParams(), SolverConfig()))
        np.random.seed(args.seed)
        cfg = JobConfig(params, solver, tuple(args.levels), args.K, args.source, args.target,
                        args.out, tuple(args.texture), args.seed)
        if args.command == "geodesic":
            cmd_geodesic(cfg)
        elif args.command == "log":
            cmd_log(cfg)
        elif args.command == "exp":
            cmd_exp(cfg, args.variation)
        elif args.command == "transport":
            cmd_transport(cfg, args.variation, args.shape)
        else:
            cmd_morph(cfg)
    except SolverError as exc:
        print(f"viscoshape {args.command}: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, IOError) as exc:
        print(f"viscoshape {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"viscoshape {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
