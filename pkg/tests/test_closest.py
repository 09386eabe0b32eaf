import numpy as np
import pytest

from voxbridge.geometry import (
    MeshDistanceQuery,
    TriMesh,
    brute_force_closest,
    icosphere,
    signed_distance,
)
from voxbridge.seeds import stream


def test_bvh_matches_brute_force():
    rng = stream(0, "test-closest")
    mesh = icosphere(2, radius=1.0)
    # deform so the BVH sees an irregular triangle soup
    mesh = TriMesh(mesh.vertices * (1.0 + 0.3 * rng.standard_normal((mesh.n_vertices, 1))),
                   mesh.faces)
    points = rng.uniform(-2.0, 2.0, size=(200, 3))

    q = MeshDistanceQuery(mesh)
    fast = q.unsigned(points)
    slow, _, _ = brute_force_closest(mesh, points)
    assert np.allclose(fast, slow, rtol=0, atol=1e-12)


def test_signed_matches_brute_force_sign():
    rng = stream(1, "test-closest")
    mesh = icosphere(2, radius=1.0)
    points = rng.uniform(-1.5, 1.5, size=(300, 3))
    q = MeshDistanceQuery(mesh, signed=True)
    sd = q.signed(points)
    # sphere: sign is |p| - 1 away from the surface
    r = np.linalg.norm(points, axis=1)
    off_surface = np.abs(r - 1.0) > 1e-3
    assert np.array_equal(np.sign(sd[off_surface]), np.sign(r[off_surface] - 1.0))


def test_sphere_distance_analytic():
    mesh = icosphere(4, radius=1.0)
    rng = stream(2, "test-closest")
    points = rng.uniform(-1.8, 1.8, size=(100, 3))
    sd = MeshDistanceQuery(mesh, signed=True).signed(points)
    analytic = np.linalg.norm(points, axis=1) - 1.0
    # icosphere at subdivision 4 approximates the sphere to ~1e-3
    assert np.max(np.abs(sd - analytic)) < 2e-3


def test_query_at_vertices_and_centroids():
    mesh = icosphere(1, radius=1.0)
    q = MeshDistanceQuery(mesh)
    at_verts = q.unsigned(mesh.vertices)
    assert np.max(at_verts) < 1e-12
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    at_faces = q.unsigned(centroids)
    assert np.max(at_faces) < 1e-12


def test_signed_distance_scalar_helper():
    mesh = icosphere(3, radius=2.0)
    assert signed_distance(mesh, (0.0, 0.0, 0.0)) < 0
    assert signed_distance(mesh, (3.0, 0.0, 0.0)) > 0


def test_closest_points_lie_on_mesh():
    rng = stream(3, "test-closest")
    mesh = icosphere(2)
    points = rng.uniform(-2, 2, size=(50, 3))
    dist, closest, tri = brute_force_closest(mesh, points)
    # returned points achieve the returned distance
    assert np.allclose(np.linalg.norm(points - closest, axis=1), dist, atol=1e-12)
    assert np.all((tri >= 0) & (tri < mesh.n_faces))
