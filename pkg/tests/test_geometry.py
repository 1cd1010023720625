import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import box_sdf, central_diff, dedup, ray_triangle_all, sphere_sdf, trilinear_loop

from avatarfield.geometry import (
    MeshError,
    ParityViolation,
    SdfVolume,
    TriMesh,
    bake_sdf,
    build_bvh,
    chamfer_distance,
    closest_distance,
    crossing_table,
    drop_unpaired,
    icosphere,
    inside_mesh,
    intersect_rays,
    load_obj,
    load_ply,
    marching_cubes,
    mesh_chamfer,
    ray_mesh_intersections,
    sample_trilinear,
    save_obj,
    save_ply,
)
from avatarfield.geometry.mesh import concatenate


def quad():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def random_rays(rng, n, radius=3.0, spread=1.0):
    o = rng.normal(size=(n, 3))
    o = o / np.linalg.norm(o, axis=1, keepdims=True) * radius
    target = rng.uniform(-spread, spread, size=(n, 3))
    d = target - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


# ------------------------------------------------------------------ mesh


def test_mesh_rejects_bad_indices():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


def test_icosphere_watertight_and_volume():
    m = icosphere(3, 1.0)
    assert m.n_faces == 1280
    assert m.watertight
    assert m.signed_volume() == pytest.approx(4 / 3 * np.pi, rel=0.03)
    assert not quad().watertight


def test_cleaned_drops_degenerate_faces():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    m = TriMesh(v, np.array([[0, 1, 2], [0, 1, 3]])).cleaned()  # second face is collinear
    assert m.n_faces == 1
    assert m.n_vertices == 3


def test_obj_ply_roundtrip(tmp_path):
    m = icosphere(2, 0.7, (0.1, 0.2, 0.3))
    save_obj(m, tmp_path / "a.obj")
    a = load_obj(tmp_path / "a.obj")
    assert np.allclose(a.vertices, m.vertices, atol=1e-8)
    assert np.array_equal(a.faces, m.faces)
    save_ply(m, tmp_path / "a.ply")
    b = load_ply(tmp_path / "a.ply")
    assert np.allclose(b.vertices, m.vertices, atol=1e-6)  # float32 payload
    assert np.array_equal(b.faces, m.faces)


def test_surface_samples_lie_on_sphere():
    pts = icosphere(4, 1.0).sample_surface(2000, seed=3)
    r = np.linalg.norm(pts, axis=1)
    assert r.max() <= 1.0 + 1e-9
    assert r.min() > 0.99


# ------------------------------------------------------------------ BVH


def test_bvh_empty_mesh_errors():
    with pytest.raises(MeshError):
        build_bvh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


def test_quad_bvh_matches_brute_force():
    bvh = build_bvh(quad())
    assert 1 <= bvh.n_leaves <= 2
    rng = np.random.default_rng(0)
    o = np.column_stack([rng.uniform(-0.5, 1.5, 200), rng.uniform(-0.5, 1.5, 200), np.full(200, 1.0)])
    d = np.tile([0.0, 0.0, -1.0], (200, 1))
    table, n = crossing_table(bvh, o, d)
    for i in range(200):
        ref = dedup(ray_triangle_all(o[i], d[i], quad().triangles()))
        assert np.allclose(table[i, : n[i]], ref, atol=1e-12)


def test_icosphere_bvh_equals_brute_force_oracle():
    m = icosphere(2, 1.0)  # 320 faces
    assert m.n_faces == 320
    bvh = build_bvh(m)
    o, d = random_rays(np.random.default_rng(1), 1000)
    table, n = crossing_table(bvh, o, d)
    for i in range(1000):
        ref = dedup(ray_triangle_all(o[i], d[i], m.triangles()))
        assert n[i] == len(ref)
        assert np.max(np.abs(table[i, : n[i]] - ref), initial=0.0) <= 1e-9


def test_sphere_intersection_depths():
    bvh = build_bvh(icosphere(4, 1.0))
    t = ray_mesh_intersections([0, 0, -3], [0, 0, 1], bvh)
    assert len(t) == 2
    assert t[0] == pytest.approx(2.0, abs=5e-3) and t[1] == pytest.approx(4.0, abs=5e-3)
    assert len(ray_mesh_intersections([0, 5, -3], [0, 0, 1], bvh)) == 0


def test_two_spheres_four_ascending_depths():
    m = concatenate([icosphere(3, 0.5, (0, 0, -1)), icosphere(3, 0.5, (0, 0, 1))])
    bvh = build_bvh(m)
    o, d = np.array([0.05, 0.02, -4.0]), np.array([0.0, 0.0, 1.0])
    t = ray_mesh_intersections(o, d, bvh)
    ref = dedup(ray_triangle_all(o, d, m.triangles()))
    assert len(t) == 4 and np.all(np.diff(t) > 0)
    assert np.allclose(t, ref, atol=1e-9)


def test_parity_even_on_random_rays():
    bvh = build_bvh(icosphere(3, 1.0))
    o, d = random_rays(np.random.default_rng(2), 5000)
    _, odd = intersect_rays(bvh, o, d)
    assert odd.mean() <= 1e-3


def test_parity_violation_signalled():
    # open quad: a ray through it crosses once
    with pytest.raises(ParityViolation):
        ray_mesh_intersections([0.3, 0.3, 1.0], [0, 0, -1.0], build_bvh(quad()))
    assert np.array_equal(drop_unpaired(np.array([1.0, 2.0, 3.0])), [2.0, 3.0])


def test_closest_distance_and_inside():
    m = icosphere(4, 1.0)
    bvh = build_bvh(m)
    rng = np.random.default_rng(3)
    p = rng.uniform(-1.5, 1.5, size=(500, 3))
    r = np.linalg.norm(p, axis=1)
    assert np.allclose(closest_distance(bvh, p), np.abs(r - 1), atol=0.01)
    far = np.abs(r - 1) > 0.02
    assert np.array_equal(inside_mesh(bvh, p)[far], (r < 1)[far])


# ------------------------------------------------------------------ SDF bake / trilinear


@pytest.fixture(scope="module")
def sphere_bake32():
    return bake_sdf(icosphere(4, 1.0), [-1.5] * 3, [1.5] * 3, 32)


def test_bake_requires_watertight():
    with pytest.raises(MeshError):
        bake_sdf(quad(), [-1] * 3, [2] * 3, 8)


def test_bake_center_is_minus_one(sphere_bake32):
    # the nearest node to the origin is 0.084 m away, so check the exact distance query
    # there and the interpolated value against the interpolated analytic field
    bvh = build_bvh(icosphere(4, 1.0))
    d0 = -closest_distance(bvh, np.zeros((1, 3)))[0]
    assert d0 == pytest.approx(-1.0, abs=0.05)
    analytic = SdfVolume.from_function(sphere_sdf, [-1.5] * 3, [1.5] * 3, 32)
    v, _ = sample_trilinear(sphere_bake32, np.zeros((1, 3)))
    va, _ = sample_trilinear(analytic, np.zeros((1, 3)))
    assert v[0] == pytest.approx(va[0], abs=0.01)
    assert v[0] < -0.9


def test_bake_corner_value(sphere_bake32):
    assert sphere_bake32.values[-1, -1, -1] == pytest.approx(np.sqrt(3 * 1.5**2) - 1, abs=5e-3)


def test_bake64_matches_analytic():
    vol = bake_sdf(icosphere(4, 1.0), [-1.5] * 3, [1.5] * 3, 64)
    ref = sphere_sdf(vol.grid_points())
    assert np.max(np.abs(vol.values - ref)) <= 0.03


def test_trilinear_node_and_cell_center():
    rng = np.random.default_rng(4)
    vol = SdfVolume(rng.normal(size=(5, 6, 7)), [0, 0, 0], [1, 2, 3])
    gp = vol.grid_points()
    v, _ = sample_trilinear(vol, gp.reshape(-1, 3))
    assert np.allclose(v, vol.values.reshape(-1), atol=1e-12)
    sp = vol.spacing
    c = vol.bbox_min + sp * (np.array([1, 2, 3]) + 0.5)
    v, _ = sample_trilinear(vol, c[None])
    assert v[0] == pytest.approx(vol.values[1:3, 2:4, 3:5].mean(), abs=1e-12)


def test_trilinear_matches_loop_oracle_and_fd_gradient():
    rng = np.random.default_rng(5)
    vol = SdfVolume(rng.normal(size=(6, 6, 6)), [-1, -1, -1], [1, 1, 1])
    x = rng.uniform(-0.99, 0.99, size=(300, 3))
    u = (x - vol.bbox_min) / vol.spacing
    frac = u - np.floor(u)
    x = x[np.all((frac > 1e-3) & (frac < 1 - 1e-3), axis=1)]  # away from cell faces
    v, g = sample_trilinear(vol, x)
    assert np.allclose(v, trilinear_loop(vol.values, vol.bbox_min, vol.bbox_max, x), atol=1e-12)
    fd = central_diff(lambda p: sample_trilinear(vol, p)[0], x, 1e-6)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1e-3)) <= 1e-6


def test_trilinear_outside_adds_box_distance():
    vol = SdfVolume.from_function(lambda p: box_sdf(p, 0.5), [-1] * 3, [1] * 3, 9)
    p = np.array([[3.0, 0.0, 0.0]])
    v, g = sample_trilinear(vol, p)
    assert v[0] == pytest.approx(0.5 + 2.0, abs=1e-9)
    assert np.allclose(g[0], [1.0, 0.0, 0.0], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
def test_trilinear_outside_is_lower_bound_growth(p):
    vol = SdfVolume.from_function(lambda q: sphere_sdf(q, 0.5), [-1] * 3, [1] * 3, 17)
    p = np.array([p])
    v, _ = sample_trilinear(vol, p)
    clamped = np.clip(p, -1, 1)
    vc, _ = sample_trilinear(vol, clamped)
    assert v[0] == pytest.approx(vc[0] + np.linalg.norm(p - clamped), abs=1e-9)


# ------------------------------------------------------------------ marching cubes


def test_marching_cubes_sphere_radius():
    m = marching_cubes(lambda p: sphere_sdf(p, 0.5), [-1] * 3, [1] * 3, 64)
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) <= 0.03)
    assert m.watertight and m.signed_volume() > 0


def test_marching_cubes_dilated_level():
    m = marching_cubes(lambda p: sphere_sdf(p, 0.5), [-1] * 3, [1] * 3, 64, level=0.05)
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 0.55, atol=0.03)


def test_marching_cubes_constant_field_is_empty():
    m = marching_cubes(lambda p: np.ones(len(p)), [-1] * 3, [1] * 3, 8)
    assert m.is_empty()


def test_marching_cubes_offset_within_one_voxel_of_analytic():
    vol = bake_sdf(icosphere(4, 0.6), [-1] * 3, [1] * 3, 48)
    m = marching_cubes(vol.values, vol.bbox_min, vol.bbox_max, vol.resolution, 0.1)
    err = np.abs(np.linalg.norm(m.vertices, axis=1) - 0.7)
    assert err.max() <= vol.spacing.max()


# ------------------------------------------------------------------ chamfer


def test_chamfer_basics():
    a = np.random.default_rng(6).normal(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)
    b = a + 0.3
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), a)


def test_chamfer_offset_spheres():
    cd = mesh_chamfer(icosphere(4, 1.0), icosphere(4, 1.0, (0.1, 0, 0)), 10000, seed=0)
    # oracle: brute-force nearest neighbours between 10^4 uniform samples of the analytic spheres
    rng = np.random.default_rng(1)

    def sphere_pts(c):
        p = rng.normal(size=(10000, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True) + c

    a, b = sphere_pts([0, 0, 0]), sphere_pts([0.1, 0, 0])

    def mean_nn(x, y):
        return np.mean([np.sqrt(((y - q) ** 2).sum(1)).min() for q in x])

    ref = 0.5 * (mean_nn(a, b) + mean_nn(b, a))
    assert cd == pytest.approx(ref, abs=0.003)
    # continuous limit: the mean of |0.1 cos(theta)| over the sphere is 0.05; finite
    # sampling adds a small positive nearest-neighbour bias
    assert 0.05 <= cd <= 0.06
