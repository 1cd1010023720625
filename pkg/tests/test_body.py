import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rot

from avatarfield.body import (
    KnnIndex,
    Pose,
    Skeleton,
    bone_softmax_weights,
    build_body_prior,
    forward_kinematics,
    interpolate_pose,
    knn_vertices,
    lbs_forward,
    load_body_config,
    pose_mesh,
    rodrigues,
)
from avatarfield.body.prior import merge_body_config
from avatarfield.body.skeleton import matrix_to_axis_angle
from avatarfield.geometry import build_bvh, inside_mesh


def random_pose(rng, J, scale=0.5):
    return Pose(rng.normal(scale=scale, size=(J, 3)), rng.normal(scale=0.2, size=3))


def chain3():
    return Skeleton([-1, 0, 1], [[0, 0, 0], [1, 0, 0], [1, 0, 0]], ["a", "b", "c"])


# ------------------------------------------------------------------ skeleton


def test_skeleton_validation():
    with pytest.raises(ValueError):
        Skeleton([0, 0], [[0, 0, 0], [1, 0, 0]], ["a", "b"])  # root must have parent -1
    with pytest.raises(ValueError):
        Skeleton([-1, 2, 0], [[0, 0, 0]] * 3, ["a", "b", "c"])  # parent after child


def test_pose_angle_limit():
    with pytest.raises(ValueError):
        Pose(np.array([[4.0, 0, 0]]), np.zeros(3))


def test_rodrigues_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        aa = rng.normal(size=3)
        ang = np.linalg.norm(aa)
        assert np.allclose(rodrigues(aa), rot(aa / ang, ang), atol=1e-12)
    assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))


def test_rest_pose_is_identity(prior):
    B = forward_kinematics(prior.skeleton, Pose.rest(prior.n_joints))
    assert np.allclose(B, np.eye(4), atol=1e-12)


def test_root_rotation_moves_everything_rigidly(prior):
    J = prior.n_joints
    rots = np.zeros((J, 3))
    rots[0] = [0, 0, np.pi / 2]
    B = forward_kinematics(prior.skeleton, Pose(rots, np.zeros(3)))
    Rz = rot([0, 0, 1], np.pi / 2)
    for b in B:
        assert np.allclose(b[:3, :3], Rz, atol=1e-12)
        assert np.allclose(b[:3, 3], 0.0, atol=1e-12)  # root at origin


def test_random_pose_bones_are_rigid(prior):
    rng = np.random.default_rng(1)
    B = forward_kinematics(prior.skeleton, random_pose(rng, prior.n_joints))
    R = B[:, :3, :3]
    assert np.max(np.abs(R @ R.transpose(0, 2, 1) - np.eye(3))) <= 1e-9
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_fk_chain_oracle():
    sk = chain3()
    rots = np.zeros((3, 3))
    rots[1] = [0, 0, np.pi / 2]  # bend at joint 1
    B = forward_kinematics(sk, Pose(rots, np.zeros(3)))
    # joint-2 world position: rotate (1,0,0) offset about joint 1 -> (1,1,0)
    p = B[2] @ np.array([2.0, 0, 0, 1])
    assert np.allclose(p[:3], [1.0, 1.0, 0.0], atol=1e-12)


def test_interpolate_pose_endpoints_and_axis_angle_roundtrip():
    rng = np.random.default_rng(2)
    a, b = random_pose(rng, 4), random_pose(rng, 4)
    assert np.allclose(interpolate_pose(a, b, 0).rotations, a.rotations, atol=1e-9)
    assert np.allclose(interpolate_pose(a, b, 1).rotations, b.rotations, atol=1e-9)
    for aa in a.rotations:
        assert np.allclose(rodrigues(matrix_to_axis_angle(rodrigues(aa))), rodrigues(aa), atol=1e-9)


# ------------------------------------------------------------------ prior


def test_default_prior_properties(prior):
    assert prior.n_joints == 24
    assert prior.template.watertight
    assert prior.template.n_vertices >= 2000
    assert prior.s_base.resolution == (64, 64, 64)
    w = prior.weights
    assert np.all(w >= 0) and np.allclose(w.sum(1), 1.0, atol=1e-6)
    assert np.all((w > 0).sum(1) <= 4)


def test_single_capsule_all_weight_on_root(capsule_prior):
    assert np.allclose(capsule_prior.weights, 1.0)


def test_dilated_mesh_encloses_template(prior):
    inside = inside_mesh(build_bvh(prior.dilated), prior.template.vertices)
    assert inside.all()


def test_base_sdf_negative_inside_template(prior):
    rng = np.random.default_rng(3)
    lo, hi = prior.template.bounds()
    pts = rng.uniform(lo, hi, size=(20000, 3))
    inside = inside_mesh(build_bvh(prior.template), pts)
    pts = pts[inside]
    # keep points strictly inside (one voxel from the surface) so trilinear smoothing cannot flip sign
    deep = prior.base_sdf(pts) < 0  # evaluated sign
    from avatarfield.geometry import closest_distance

    far = closest_distance(build_bvh(prior.template), pts) > prior.s_base.spacing.max()
    probe = pts[far][:100]
    assert len(probe) == 100
    assert np.all(prior.base_sdf(probe) < 0)
    assert deep[far].all()


def test_pose_mesh_identity_and_rigid(prior):
    I = np.tile(np.eye(4), (prior.n_joints, 1, 1))
    assert np.allclose(prior.posed_vertices(I).vertices, prior.template.vertices)
    R = np.eye(4)
    R[:3, :3] = rot([1, 2, 3], 0.7)
    R[:3, 3] = [0.1, -0.2, 0.3]
    posed = pose_mesh(prior.template, prior.weights, np.tile(R, (prior.n_joints, 1, 1)))
    v0, v1 = prior.template.vertices[:300], posed.vertices[:300]
    d0 = np.linalg.norm(v0[:, None] - v0[None], axis=-1)
    d1 = np.linalg.norm(v1[:, None] - v1[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) <= 1e-9
    assert np.array_equal(posed.faces, prior.template.faces)


def test_elbow_bend_rotates_fully_skinned_vertices(prior):
    names = prior.skeleton.names
    j = names.index("left_elbow")
    rots = np.zeros((prior.n_joints, 3))
    rots[j] = [0, 0, np.pi / 4]
    B = forward_kinematics(prior.skeleton, Pose(rots, np.zeros(3)))
    # forearm vertices (dominant bone = elbow), re-skinned 100% to it
    one = np.nonzero(prior.weights.argmax(1) == j)[0]
    assert len(one) > 0
    w = np.zeros((len(one), prior.n_joints))
    w[:, j] = 1.0
    joint = prior.skeleton.rest_joints()[j]
    v = prior.template.vertices[one]
    expected = (v - joint) @ rot([0, 0, 1], np.pi / 4).T + joint
    assert np.allclose(lbs_forward(v, w, B), expected, atol=1e-12)


def test_bone_softmax_truncation():
    sk = chain3()
    w = bone_softmax_weights(sk, np.array([[0.5, 0.1, 0.0]]), 0.5, 0.02, top_k=1)
    assert np.allclose(w, [[1.0, 0.0, 0.0]])


def test_config_rejects_unknown_key(tmp_path):
    with pytest.raises(KeyError, match="bogus"):
        merge_body_config({"bogus": 1})
    (tmp_path / "b.yaml").write_text(yaml.safe_dump({"sdf": {"resolution": 32}}))
    cfg = load_body_config(tmp_path / "b.yaml")
    assert cfg["sdf"]["resolution"] == 32 and "bbox" in cfg["sdf"]


def test_external_template_import(tmp_path, capsule_prior):
    from avatarfield.body import single_capsule_config
    from avatarfield.geometry import save_obj

    save_obj(capsule_prior.template, tmp_path / "t.obj")
    capsule_prior.weights.astype("<f4").tofile(tmp_path / "w.bin")
    cfg = single_capsule_config()
    cfg["external"] = {"template": str(tmp_path / "t.obj"), "weights": str(tmp_path / "w.bin")}
    p = build_body_prior(cfg)
    assert p.template.n_vertices == capsule_prior.template.n_vertices
    assert np.allclose(p.weights, 1.0)


# ------------------------------------------------------------------ KNN


def test_knn_against_brute_force(prior):
    V = prior.template.vertices
    rng = np.random.default_rng(4)
    x = rng.uniform(*prior.template.bounds(), size=(1000, 3))
    idx, dist = KnnIndex(V).query(x, 10)
    d = np.linalg.norm(x[:, None] - V[None], axis=-1)
    ref = np.argsort(d, axis=1, kind="stable")[:, :10]
    assert np.array_equal(np.sort(idx, 1), np.sort(ref, 1))
    assert np.allclose(dist, np.take_along_axis(d, ref, 1), atol=1e-12)


def test_knn_exact_vertex_and_all():
    V = np.random.default_rng(5).normal(size=(20, 3))
    res = knn_vertices(V, V[7], 3)
    assert res[0] == (7, 0.0)
    full = knn_vertices(V, np.zeros(3), 20)
    assert sorted(i for i, _ in full) == list(range(20))
    assert all(a[1] <= b[1] for a, b in zip(full, full[1:]))
    with pytest.raises(ValueError):
        knn_vertices(V, np.zeros(3), 21)


def test_knn_tie_break_lower_index():
    V = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, 0, 5.0]])
    idx, _ = KnnIndex(V).query(np.zeros((1, 3)), 3)
    assert idx[0].tolist() == [0, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fk_then_rest_is_identity_on_joints(seed):
    sk = chain3()
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, 3, 0.8)
    pose = Pose(np.clip(pose.rotations, -1.5, 1.5), pose.translation)
    B = forward_kinematics(sk, pose)
    Binv = forward_kinematics(sk, Pose.rest(3))
    J = np.c_[sk.rest_joints(), np.ones(3)]
    posed = np.einsum("jab,jb->ja", B, J)
    back = np.einsum("jab,jb->ja", np.linalg.inv(B), posed)
    assert np.allclose(back, J, atol=1e-9)
    assert np.allclose(Binv, np.eye(4))
