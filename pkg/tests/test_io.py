import struct

import numpy as np
import pytest

from viscoshape.fem import make_mesh, mask_to_image, rasterize_mask
from viscoshape.io import (FieldFormatError, load_variation, read_image, read_manifest, read_vfld,
                           save_variation, write_image, write_manifest, write_vfld)
from viscoshape.logexp import ShapeVariation, VariationFrame
from viscoshape.shapes import disk


@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_image_round_trip(tmp_path, suffix):
    img = (np.arange(33 * 33) % 256).astype(np.uint8).reshape(33, 33)
    write_image(tmp_path / f"a{suffix}", img)
    assert np.array_equal(read_image(tmp_path / f"a{suffix}"), img)


def test_pgm_is_binary_p5(tmp_path):
    write_image(tmp_path / "a.pgm", np.zeros((5, 5), dtype=np.uint8))
    assert (tmp_path / "a.pgm").read_bytes()[:2] == b"P5"


def test_mask_image_round_trip(tmp_path):
    m = disk(5, radius=0.3)
    write_image(tmp_path / "m.pgm", mask_to_image(m))
    back = rasterize_mask(read_image(tmp_path / "m.pgm"))
    assert np.array_equal(back.values, m.values)


def test_unreadable_image(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"garbage")
    with pytest.raises(IOError):
        read_image(tmp_path / "x.pgm")


def test_vfld_layout_and_round_trip(tmp_path, rng):
    mesh = make_mesh(3)
    v = rng.standard_normal((mesh.num_nodes, 2))
    write_vfld(tmp_path / "f.vfld", 3, v)
    data = (tmp_path / "f.vfld").read_bytes()
    assert data[:4] == b"VFLD"
    assert struct.unpack("<III", data[4:16]) == (1, 3, 2)
    assert np.frombuffer(data[16:32], "<f8").tolist() == v[0].tolist()
    level, back = read_vfld(tmp_path / "f.vfld")
    assert level == 3 and np.array_equal(back, v)
    s = rng.standard_normal(mesh.num_nodes)
    write_vfld(tmp_path / "s.vfld", 3, s)
    assert np.array_equal(read_vfld(tmp_path / "s.vfld")[1], s)


def test_vfld_errors(tmp_path):
    (tmp_path / "bad.vfld").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FieldFormatError):
        read_vfld(tmp_path / "bad.vfld")
    (tmp_path / "short.vfld").write_bytes(b"VFLD" + struct.pack("<III", 1, 3, 2) + bytes(8))
    with pytest.raises(FieldFormatError):
        read_vfld(tmp_path / "short.vfld")
    with pytest.raises(FieldFormatError):
        write_vfld(tmp_path / "x.vfld", 3, np.zeros((5, 2)))


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.json", a=1, b=[1.5, 2.0], c=None)
    assert read_manifest(tmp_path / "m.json") == {"a": 1, "b": [1.5, 2.0], "c": None}


def test_variation_round_trip(tmp_path, rng):
    base = disk(4, radius=0.25)
    mesh = base.mesh
    zeta = 0.01 * rng.standard_normal((mesh.num_nodes, 2))
    fr = VariationFrame(base, mesh.coords.copy(), mesh.coords + zeta, 0.001 * zeta, base, reg_weight=0.0025)
    v = ShapeVariation(base, zeta, fr)
    save_variation(tmp_path / "v", v)
    w = load_variation(tmp_path / "v")
    assert np.array_equal(w.zeta, v.zeta)
    assert np.array_equal(w.base.values, base.values)
    assert np.array_equal(w.frame.phi1, fr.phi1) and np.array_equal(w.frame.psi, fr.psi)
    assert w.frame.reg_weight == 0.0025
    save_variation(tmp_path / "plain", ShapeVariation(base, zeta))
    assert load_variation(tmp_path / "plain").frame is None
