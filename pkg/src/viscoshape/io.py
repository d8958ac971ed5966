"""Raster and field file formats.

Rasters are 8-bit grayscale PGM (P5) or PNG.  Fields use the VFLD layout:
a 16-byte header ``b"VFLD"``, version, level, components (little-endian
u32), followed by float64 little-endian node values with the components of
each node stored next to each other.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .fem import make_mesh

VFLD_MAGIC = b"VFLD"
VFLD_VERSION = 1


class FieldFormatError(IOError):
    pass


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise IOError(f"cannot read raster {path}: {exc}") from exc


def write_image(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else None
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(path, format=fmt)


def write_vfld(path, level: int, values: np.ndarray) -> None:
    mesh = make_mesh(level)
    v = np.asarray(values, dtype="<f8")
    comps = 1 if v.ndim == 1 else v.shape[1]
    if v.shape[0] != mesh.num_nodes:
        raise FieldFormatError("field length does not match the mesh level")
    with open(path, "wb") as fh:
        fh.write(VFLD_MAGIC + struct.pack("<III", VFLD_VERSION, level, comps))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_vfld(path):
    """Return ``(level, values)``; vector fields come back as ``(N, c)``."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != VFLD_MAGIC:
        raise FieldFormatError(f"{path}: not a VFLD file")
    version, level, comps = struct.unpack("<III", data[4:16])
    if version != VFLD_VERSION:
        raise FieldFormatError(f"{path}: unsupported VFLD version {version}")
    mesh = make_mesh(level)
    vals = np.frombuffer(data[16:], dtype="<f8")
    if vals.size != mesh.num_nodes * comps:
        raise FieldFormatError(f"{path}: payload size does not match header")
    vals = vals.astype(float)
    return level, (vals if comps == 1 else vals.reshape(-1, comps))


def write_manifest(path, **entries) -> None:
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# variations

def save_variation(directory, v) -> None:
    """Write a :class:`ShapeVariation` (base mask, nodal field and frame) to ``directory``."""
    from .fem import mask_to_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    level = v.mesh.level
    write_image(d / "base.pgm", mask_to_image(v.base))
    write_vfld(d / "zeta.vfld", level, v.zeta)
    entries = dict(kind="variation", level=level, base="base.pgm", zeta="zeta.vfld", frame=None)
    fr = v.frame
    if fr is not None:
        write_image(d / "ref.pgm", mask_to_image(fr.ref))
        write_image(d / "ref1.pgm", mask_to_image(fr.ref1))
        write_vfld(d / "phi0.vfld", level, fr.phi0)
        write_vfld(d / "phi1.vfld", level, fr.phi1)
        frame = dict(ref="ref.pgm", ref1="ref1.pgm", phi0="phi0.vfld", phi1="phi1.vfld",
                     psi=None, reg_weight=fr.reg_weight)
        if fr.psi is not None:
            write_vfld(d / "psi.vfld", level, fr.psi)
            frame["psi"] = "psi.vfld"
        entries["frame"] = frame
    write_manifest(d / "manifest.json", **entries)


def load_variation(directory):
    """Inverse of :func:`save_variation`."""
    from .fem import rasterize_mask
    from .logexp import ShapeVariation, VariationFrame

    d = Path(directory)
    try:
        man = read_manifest(d / "manifest.json")
        level = int(man["level"])

        def field(name):
            lv, vals = read_vfld(d / name)
            if lv != level:
                raise FieldFormatError(f"{name}: level {lv} differs from manifest level {level}")
            return vals

        base = rasterize_mask(read_image(d / man["base"]), level)
        zeta = field(man["zeta"])
        fr = None
        if man.get("frame"):
            f = man["frame"]
            fr = VariationFrame(rasterize_mask(read_image(d / f["ref"]), level), field(f["phi0"]),
                                field(f["phi1"]), field(f["psi"]) if f.get("psi") else None,
                                rasterize_mask(read_image(d / f["ref1"]), level),
                                reg_weight=float(f.get("reg_weight", 0.0)))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FieldFormatError(f"{d}: malformed variation manifest ({exc})") from exc
    return ShapeVariation(base, zeta, fr)
