import numpy as np
import pytest

from viscoshape.energy import MaterialParams
from viscoshape.geodesic import SolverConfig, minimize_path
from viscoshape.logexp import ShapeVariation, exp_1
from viscoshape.shapes import disk, ellipse, letter, translated
from viscoshape.toyman import ToySpace, plane
from viscoshape.transport import (LadderSpace, ShapeLadder, TransportJob, discrete_connection,
                                  ladder_transport, matching_maps, schild_step, transport_path,
                                  transport_step)

P = MaterialParams()
FAST = SolverConfig(schedule=((4, 1),))


def bump_field(mesh, amp, c=(0.5, 0.5), r=0.15):
    d = mesh.coords - np.asarray(c)
    g = np.exp(-np.sum(d ** 2, axis=1) / r ** 2)
    return amp * d * g[:, None] / r


def test_interface_is_abstract():
    space = LadderSpace()
    with pytest.raises(NotImplementedError):
        space.exp1(0, 0)


def test_schild_step_on_the_plane():
    v, rung = schild_step(ToySpace(plane()), np.array([0.1, 0.1]), np.array([0.5, 0.3]),
                          np.array([0.02, 0.05, 0.0]))
    assert np.allclose(v, [0.02, 0.05, 0.0], atol=1e-15)
    assert np.allclose(rung.cross, [0.31, 0.225], atol=1e-15)


def test_constant_path_transport_is_identity():
    O = disk(4, radius=0.25)
    v = ShapeVariation(O, bump_field(O.mesh, 0.01))
    out = transport_path(TransportJob([O, O, O], v), FAST, P)
    on = O.binary()
    assert np.abs(out.zeta[on] - v.zeta[on]).max() <= 1e-3 * np.abs(v.zeta[on]).max()


def test_zero_variation_stays_zero():
    O = disk(4, radius=0.2)
    O1 = translated(O, (2 * O.mesh.h, 0.0))
    out = transport_step(O, O1, ShapeVariation.zero(O), FAST, P)
    assert out.sup_norm() <= 1e-6


def test_translation_path_keeps_the_variation():
    """Along a rigid translation the transported field is the translated field."""
    O = ellipse(4, axes=(0.25, 0.15))
    t = np.array([2 * O.mesh.h, 0.0])
    v = ShapeVariation(O, bump_field(O.mesh, 0.01))
    job = TransportJob([O, translated(O, t)], v)
    out = transport_path(job, FAST, P)
    assert len(job.rungs) == 1
    on = O.binary()
    assert np.abs(out.lagrangian_frame().lagrangian()[on] - v.zeta[on]).max() <= 0.05 * np.abs(v.zeta[on]).max()


def test_transport_job_validation():
    O = disk(3)
    v = ShapeVariation.zero(O)
    with pytest.raises(ValueError):
        TransportJob([O], v)
    with pytest.raises(ValueError):
        TransportJob([disk(3, radius=0.3), O], v)


def test_matching_maps_of_identical_shapes():
    O = disk(3)
    maps = matching_maps([O, O], FAST, P)
    assert len(maps) == 2 and np.array_equal(maps[0], maps[1])


def test_shape_ladder_midpoint_of_identical_points():
    O = disk(4, radius=0.2)
    space = ShapeLadder(O, P)
    x = O.mesh.coords.copy()
    assert np.allclose(space.midpoint(x, x), x, atol=1e-10)
    assert np.array_equal(space.log1(x, space.exp1(x, 0 * x)), 0 * x)


def test_discrete_connection_of_zero_field():
    O = disk(4, radius=0.2)
    xi = ShapeVariation(O, np.tile([O.mesh.h, 0.0], (O.mesh.num_nodes, 1)))
    out = discrete_connection(xi, ShapeVariation.zero, 1.0, FAST, P)
    assert out.sup_norm() <= 1e-6


def test_serif_grows_similar_area_after_transport():
    """A serif pulled out of the top of an upright L adds a comparable area
    after transport along the geodesic to the slanted L."""
    a, b = letter(5, "L"), letter(5, "L", slant=0.25)
    mesh = a.mesh
    d = mesh.coords - [0.37, 0.8]
    zeta = 0.08 * np.exp(-np.sum(d ** 2, axis=1) / 0.1 ** 2)[:, None] * [0.0, 1.0]
    v = ShapeVariation(a, zeta)
    geo = minimize_path(a, b, SolverConfig(schedule=((4, 2), (5, 4))), P)
    job = TransportJob.from_geodesic(geo.path, v)
    out = transport_path(job, SolverConfig(), P)
    assert len(job.rungs) >= 4
    added0 = exp_1(v).area() - a.area()
    added1 = exp_1(out).area() - b.area()
    assert added0 >= 5 * mesh.h ** 2
    assert abs(added1 - added0) <= 0.3 * added0


def test_ladder_refines_large_steps():
    class Guarded(ToySpace):
        def exp2(self, x, m):
            from viscoshape.logexp import StepTooLargeError
            if np.linalg.norm(np.asarray(m) - x) > 0.2:
                raise StepTooLargeError("too far")
            return super().exp2(x, m)

    space = Guarded(plane())
    pts = [np.array([0.0, 0.0]), np.array([0.6, 0.0])]
    v, rungs = ladder_transport(space, pts, np.array([0.0, 0.01, 0.0]), refine=2)
    assert len(rungs) == 2
    assert np.allclose(v, [0.0, 0.01, 0.0], atol=1e-15)
    from viscoshape.logexp import StepTooLargeError
    with pytest.raises(StepTooLargeError):
        ladder_transport(space, pts, np.array([0.0, 0.01, 0.0]), refine=0)
