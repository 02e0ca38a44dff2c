import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from privtrack.geometry import (CameraModel, GeometryError, Label, ProjectionError, RigidTransform, SamplingError,
                                SurfacePoint, TriangleMesh, axis_angle_matrix, blend, box_mesh, locate, parse_obj,
                                project, sample_surface_points, to_obj)

UNIT_TRI = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def random_transform(r):
    return RigidTransform(axis_angle_matrix(r.standard_normal(3), r.uniform(-np.pi, np.pi)), r.standard_normal(3))


def test_degenerate_and_out_of_range_faces_rejected():
    with pytest.raises(GeometryError, match="degenerate"):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(GeometryError, match="out of range"):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_surface_point_barycentric_invariant():
    with pytest.raises(GeometryError):
        SurfacePoint(0, (0.5, 0.6, -0.1))
    with pytest.raises(GeometryError):
        SurfacePoint(0, (0.5, 0.5, 0.1))


def test_rigid_transform_validity_and_inverse():
    r = np.random.default_rng(0)
    T = random_transform(r)
    assert T.is_valid()
    p = r.standard_normal((5, 3))
    assert np.abs(T.inverse().apply(T.apply(p)) - p).max() <= 1e-12
    assert not RigidTransform(np.diag([1.0, 1.0, -1.0])).is_valid()
    assert np.array_equal(RigidTransform.from_vector(T.to_vector()).rotation, T.rotation)


def test_sample_single_triangle():
    pts = sample_surface_points([UNIT_TRI], 1, (0, 0, 0), 2.0, 0.0, np.random.default_rng(0))
    assert len(pts) == 1 and pts[0].face_index == 0
    assert abs(sum(pts[0].barycentric) - 1.0) <= 1e-12


def test_sample_area_weighting_monte_carlo():
    # face 0 has area 1, face 1 has area 3 -> expected frequency 0.75
    mesh = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 1, 0], [0, 0, 1], [6, 0, 1], [0, 1, 1]],
                        [[0, 1, 2], [3, 4, 5]])
    assert np.allclose(mesh.face_areas(), [1.0, 3.0])
    pts = sample_surface_points([mesh], 100_000, (0, 0, 0), 10.0, 0.0, np.random.default_rng(1))
    freq = np.mean([p.face_index == 1 for p in pts])
    assert abs(freq - 0.75) <= 0.01


def test_sample_label_counts_and_errors():
    robot = box_mesh((0.1, 0.1, 0.1), body_id=0, label=Label.ROBOT)
    scene = box_mesh((0.5, 0.5, 0.1), body_id=1, label=Label.SCENE)
    rng = np.random.default_rng(2)
    pts = sample_surface_points([robot, scene], 10, (0, 0, 0), 1.0, 1.0, rng)
    assert all(p.label is Label.ROBOT for p in pts)
    pts = sample_surface_points([robot, scene], 7, (0, 0, 0), 1.0, 0.5, rng)
    assert sum(p.label is Label.ROBOT for p in pts) == 3
    with pytest.raises(SamplingError, match="scene"):
        sample_surface_points([robot], 4, (0, 0, 0), 1.0, 0.5, rng)
    with pytest.raises(SamplingError, match="robot"):
        sample_surface_points([robot, scene], 4, (5, 5, 5), 0.1, 0.5, rng)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_sampled_barycentrics_are_normalised(seed, n):
    pts = sample_surface_points([box_mesh((1, 2, 3))], n, (0, 0, 0), 5.0, 0.0, np.random.default_rng(seed))
    b = np.array([p.barycentric for p in pts])
    assert len(pts) == n
    assert np.abs(b.sum(axis=1) - 1.0).max() <= 1e-12 and b.min() >= 0.0


def test_locate_examples():
    T = RigidTransform.from_axis_angle((0, 0, 1), 0.3, (1.0, 2.0, 3.0))
    assert np.array_equal(locate(SurfacePoint(0, (1.0, 0.0, 0.0)), UNIT_TRI, T), T.apply(np.zeros(3)))
    c = locate(SurfacePoint(0, (1 / 3, 1 / 3, 1 - 2 / 3)), UNIT_TRI, RigidTransform())
    assert np.abs(c - UNIT_TRI.vertices.mean(axis=0)).max() <= 1e-15
    sp = SurfacePoint(0, (0.2, 0.3, 0.5))
    shifted = locate(sp, UNIT_TRI, RigidTransform.from_translation((0, 0, 1))) - locate(sp, UNIT_TRI, RigidTransform())
    assert np.array_equal(shifted, [0.0, 0.0, 1.0])
    with pytest.raises(GeometryError):
        locate(SurfacePoint(3, (1.0, 0.0, 0.0)), UNIT_TRI, T)


def test_locate_matches_vertex_transform_oracle():
    r = np.random.default_rng(3)
    mesh = box_mesh((0.3, 0.2, 0.1))
    for _ in range(200):
        T = random_transform(r)
        f = int(r.integers(mesh.n_faces))
        b = r.dirichlet(np.ones(3))
        b[2] = 1.0 - b[0] - b[1]
        sp = SurfacePoint(f, tuple(b))
        verts = [T.rotation @ mesh.vertices[i] + T.translation for i in mesh.faces[f]]
        oracle = b[0] * verts[0] + b[1] * verts[1] + b[2] * verts[2]
        got = locate(sp, mesh, T)
        assert np.abs(got - oracle).max() <= 1e-12
        assert np.abs(got - T.apply(locate(sp, mesh, RigidTransform()))).max() <= 1e-12


def test_project_examples():
    cam = CameraModel(RigidTransform(), fx=100.0, fy=100.0, cx=0.0, cy=0.0)
    assert np.array_equal(project([1.0, 0.0, 1.0], cam), [100.0, 0.0])
    cam2 = CameraModel(RigidTransform())
    assert np.array_equal(project([0.0, 0.0, 2.0], cam2), [cam2.cx, cam2.cy])
    with pytest.raises(ProjectionError) as info:
        project([0.0, 0.0, -0.5], cam2)
    assert info.value.depth == -0.5


def test_project_of_located_point_matches_brute_force():
    r = np.random.default_rng(4)
    cam = CameraModel.look_at((0.0, -1.0, 1.0), (0.0, 0.0, 0.0))
    mesh = box_mesh((0.2, 0.2, 0.2))
    for _ in range(50):
        T = RigidTransform.from_axis_angle(r.standard_normal(3), r.uniform(0, 6), r.uniform(-0.1, 0.1, 3))
        sp = SurfacePoint(int(r.integers(12)), (0.25, 0.25, 0.5))
        verts = np.array([T.rotation @ mesh.vertices[i] + T.translation for i in mesh.faces[sp.face_index]])
        world = 0.25 * verts[0] + 0.25 * verts[1] + 0.5 * verts[2]
        pc = cam.pose.rotation @ world + cam.pose.translation
        oracle = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
        assert np.abs(project(locate(sp, mesh, T), cam) - oracle).max() <= 1e-9


def test_obj_round_trip_and_errors():
    mesh = box_mesh((1, 2, 3), center=(0.5, 0, 0))
    back = parse_obj(to_obj(mesh))
    assert np.array_equal(back.vertices, mesh.vertices) and np.array_equal(back.faces, mesh.faces)
    with pytest.raises(GeometryError, match="triangular"):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf 1 2 3 4\n")


def test_blend_vectorised():
    b = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.array_equal(blend(UNIT_TRI, [0, 0], b), [[0, 0, 0], [0, 1, 0]])
