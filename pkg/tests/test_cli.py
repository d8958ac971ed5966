import csv
import json

import numpy as np
import pytest
from scipy import ndimage

from viscoshape.cli import (BACKGROUND, EXIT_INPUT, EXIT_IO, EXIT_OK, EXIT_SOLVER, JobConfig, morph_frames,
                            parse_config_file, run)
from viscoshape.energy import MaterialParams
from viscoshape.fem import Deformation, mask_to_image, rasterize_mask
from viscoshape.geodesic import mismatch_penalty
from viscoshape.io import load_variation, read_image, save_variation, write_image
from viscoshape.logexp import ShapeVariation, symmetric_difference
from viscoshape.shapes import annulus, disk, ellipse, letter, translated


def save_mask(path, m):
    write_image(path, mask_to_image(m))
    return str(path)


def frames(directory, prefix="frame"):
    return [read_image(p) for p in sorted(directory.glob(f"{prefix}_*.pgm"))]


# ---------------------------------------------------------------------------
# configuration

def test_job_config_validation(tmp_path):
    with pytest.raises(ValueError):
        JobConfig(levels=(6, 5))
    with pytest.raises(ValueError):
        JobConfig(K=0)
    with pytest.raises(FileNotFoundError):
        JobConfig(source=tmp_path / "missing.pgm")
    assert JobConfig(levels=(4, 6), K=4).schedule() == ((4, 1), (5, 2), (6, 4))
    assert JobConfig(levels=(5, 6), K=3).schedule() == ((5, 3), (6, 3))


def test_config_file(tmp_path):
    f = tmp_path / "job.cfg"
    f.write_text("# defaults but softer\nlambda = 2\nmu = 0.5\ndelta1 = 0.02\ntol = 1e-6\nmax_iter = 30\n")
    params, solver = parse_config_file(f)
    assert (params.lam, params.mu, params.delta1) == (2.0, 0.5, 0.02)
    assert (solver.tol, solver.max_iter) == (1e-6, 30)
    f.write_text("gamma = 3\n")
    with pytest.raises(ValueError):
        parse_config_file(f)


# ---------------------------------------------------------------------------
# exit codes

def test_exit_codes(tmp_path):
    src = save_mask(tmp_path / "a.pgm", disk(4))
    assert run(["geodesic", "--source", src, "--target", str(tmp_path / "none.pgm"),
                "--out", str(tmp_path / "o")]) == EXIT_IO
    assert run(["geodesic", "--source", src, "--out", str(tmp_path / "o")]) == EXIT_INPUT
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert run(["geodesic", "--source", src, "--target", src, "--config", str(bad),
                "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert run(["exp", "--variation", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_IO
    garbled = tmp_path / "g.pgm"
    garbled.write_bytes(b"P7 not an image")
    assert run(["geodesic", "--source", str(garbled), "--target", src, "--levels", "4..4",
                "--out", str(tmp_path / "o")]) in (EXIT_IO, EXIT_INPUT)


def test_solver_failure_exit_code(tmp_path):
    src = save_mask(tmp_path / "a.pgm", disk(4, radius=0.25))
    tgt = save_mask(tmp_path / "b.pgm", ellipse(4, axes=(0.28, 0.16)))
    cfg = tmp_path / "c.cfg"
    cfg.write_text("max_iter = 1\n")
    out = tmp_path / "o"
    assert run(["geodesic", "--source", src, "--target", tgt, "-K", "2", "--levels", "4..4",
                "--config", str(cfg), "--out", str(out)]) == EXIT_SOLVER
    assert (out / "failed").is_dir()


# ---------------------------------------------------------------------------
# geodesic

def test_identical_masks(tmp_path):
    src = save_mask(tmp_path / "a.pgm", disk(4))
    out = tmp_path / "geo"
    assert run(["geodesic", "--source", src, "--target", src, "-K", "3", "--levels", "4..4",
                "--out", str(out)]) == EXIT_OK
    imgs = frames(out)
    assert len(imgs) == 4 and all(np.array_equal(f, imgs[0]) for f in imgs)
    man = json.loads((out / "manifest.json").read_text())
    assert man["total"] <= 1e-8
    assert len(frames(out, "heat")) == 3      # one per step
    assert (out / "energy.csv").exists()


def test_translated_disk_energy_log(tmp_path):
    O = disk(4, radius=0.2)
    src = save_mask(tmp_path / "a.pgm", O)
    tgt = save_mask(tmp_path / "b.pgm", translated(O, (2 * O.mesh.h, 0.0)))
    out = tmp_path / "geo"
    assert run(["geodesic", "--source", src, "--target", tgt, "-K", "2", "--levels", "4..4",
                "--out", str(out)]) == EXIT_OK
    with open(out / "energy.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and float(rows[-1]["total"]) <= 1e-6
    man = json.loads((out / "manifest.json").read_text())
    assert max(man["pair_energies"]) <= 1e-8


def test_disk_to_annulus_keeps_topology(tmp_path):
    O, A = disk(4, radius=0.25), annulus(4, r_in=0.1, r_out=0.25)
    src = save_mask(tmp_path / "a.pgm", O)
    tgt = save_mask(tmp_path / "b.pgm", A)
    out = tmp_path / "geo"
    assert run(["geodesic", "--source", src, "--target", tgt, "-K", "2", "--levels", "4..4",
                "--out", str(out)]) == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    initial = mismatch_penalty(A, O, Deformation.identity(O.mesh), MaterialParams())
    assert man["penaltyK"] >= 0.5 * initial
    assert man["penaltyK"] >= 10 * sum(man["pair_energies"])
    for img in frames(out):
        inside = img >= 128
        assert ndimage.label(inside)[1] == 1
        assert ndimage.label(~inside)[1] == 1       # no hole opened


# ---------------------------------------------------------------------------
# log, exp, transport

def test_exp_of_zero_variation(tmp_path):
    O = disk(4)
    save_variation(tmp_path / "v", ShapeVariation.zero(O))
    out = tmp_path / "exp"
    assert run(["exp", "--variation", str(tmp_path / "v"), "-K", "4", "--levels", "4..4",
                "--out", str(out)]) == EXIT_OK
    imgs = frames(out)
    assert len(imgs) == 4
    assert all(np.array_equal(f, mask_to_image(O)) for f in imgs)


def test_log_exp_round_trip(tmp_path):
    a, b = letter(5, "L"), letter(5, "L", slant=0.25)
    src = save_mask(tmp_path / "a.pgm", a)
    tgt = save_mask(tmp_path / "b.pgm", b)
    assert run(["log", "--source", src, "--target", tgt, "-K", "4", "--levels", "4..5",
                "--out", str(tmp_path / "v")]) == EXIT_OK
    assert run(["exp", "--variation", str(tmp_path / "v"), "-K", "4", "--levels", "4..5",
                "--out", str(tmp_path / "exp")]) == EXIT_OK
    last = rasterize_mask(frames(tmp_path / "exp")[-1], 5)
    assert symmetric_difference(last, b) <= 0.02 * b.area()


def test_transport_on_constant_path(tmp_path):
    O = disk(4, radius=0.25)
    mesh = O.mesh
    d = mesh.coords - 0.5
    v = ShapeVariation(O, 0.01 * d * np.exp(-np.sum(d ** 2, axis=1) / 0.15 ** 2)[:, None] / 0.15)
    save_variation(tmp_path / "v", v)
    m = save_mask(tmp_path / "m.pgm", O)
    assert run(["transport", "--variation", str(tmp_path / "v"), "--shape", m, "--shape", m,
                "--shape", m, "--levels", "4..4", "--out", str(tmp_path / "t")]) == EXIT_OK
    out = load_variation(tmp_path / "t")
    on = O.binary()
    assert np.abs(out.zeta[on] - v.zeta[on]).max() <= 1e-3 * np.abs(v.zeta[on]).max()


# ---------------------------------------------------------------------------
# morph

def texture(n, rng):
    return rng.integers(0, 256, size=(n, n)).astype(np.uint8)


def test_morph_identity_path(rng):
    O = disk(4, radius=0.3)
    mesh = O.mesh
    tex = texture(mesh.n + 1, rng)
    out = morph_frames([mesh.coords.copy()] * 3, O, tex)
    on = mesh.grid(O.binary())
    for f in out:
        assert np.array_equal(f[on], tex[on])
        assert np.all(f[~on] == BACKGROUND)


def test_morph_translation_path(rng):
    O = disk(5, radius=0.2)
    mesh = O.mesh
    tex = texture(mesh.n + 1, rng)
    t = 3
    maps = [mesh.coords + [j * t * mesh.h, 0.0] for j in range(3)]
    out = morph_frames(maps, O, tex)
    on = mesh.grid(O.binary())
    for j, f in enumerate(out):
        shifted = np.roll(on, j * t, axis=1)
        match = f[shifted] == np.roll(tex, j * t, axis=1)[shifted]
        assert match.mean() >= 0.99


def test_morph_blend_ends_on_target_texture(rng):
    O = disk(4, radius=0.25)
    mesh = O.mesh
    src, tgt = texture(mesh.n + 1, rng), texture(mesh.n + 1, rng)
    maps = [mesh.coords + [j * mesh.h, 0.0] for j in range(3)]
    out = morph_frames(maps, O, src, tgt)
    on = np.roll(mesh.grid(O.binary()), 2, axis=1)
    assert np.abs(out[-1][on].astype(int) - tgt[on]).max() <= 1
    on0 = mesh.grid(O.binary())
    assert np.abs(out[0][on0].astype(int) - src[on0]).max() <= 1


def test_morph_command(tmp_path, rng):
    O = disk(4, radius=0.25)
    src = save_mask(tmp_path / "a.pgm", O)
    geo = tmp_path / "geo"
    assert run(["geodesic", "--source", src, "--target", src, "-K", "2", "--levels", "4..4",
                "--out", str(geo)]) == EXIT_OK
    tex = tmp_path / "tex.pgm"
    write_image(tex, texture(O.mesh.n + 1, rng))
    assert run(["morph", "--source", str(geo), "--texture", str(tex), "--out", str(tmp_path / "m")]) == EXIT_OK
    assert len(frames(tmp_path / "m")) == 3
    assert run(["morph", "--source", str(geo), "--out", str(tmp_path / "m")]) == EXIT_INPUT
    assert run(["morph", "--source", str(tmp_path), "--texture", str(tex),
                "--out", str(tmp_path / "m")]) == EXIT_INPUT
