import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rot

from avatarfield.body import KnnIndex, Pose, forward_kinematics, lbs_forward
from avatarfield.deform import (
    DegenerateBlend,
    SkinningNet,
    initial_weights,
    iterative_backward_deform,
    lbs_backward,
)
from avatarfield.io.config import DEFAULT_CONFIG


def simplex_rows(rng, n, j):
    w = rng.random((n, j))
    return w / w.sum(1, keepdims=True)


def rigid(rng):
    M = np.eye(4)
    M[:3, :3] = rot(rng.normal(size=3), rng.uniform(-np.pi, np.pi))
    M[:3, 3] = rng.normal(size=3)
    return M


# ------------------------------------------------------------------ initial weights


def test_initial_weights_k1_is_nearest_vertex():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(30, 3))
    W = simplex_rows(rng, 30, 5)
    x = V[4] + 0.01
    w = initial_weights(x, KnnIndex(V), W, 1)
    assert np.allclose(w[0], W[4])


def test_initial_weights_equal_distances_average():
    V = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0, 9.0]])
    W = simplex_rows(np.random.default_rng(1), 3, 4)
    w = initial_weights(np.zeros(3), KnnIndex(V), W, 2)
    assert np.allclose(w[0], (W[0] + W[1]) / 2, atol=1e-12)


def test_initial_weights_inverse_distance_example():
    # d = (1, 3): beta = (1/4, 3/4), 1/beta = (4, 4/3) -> (3 W1 + W2) / 4
    V = np.array([[1.0, 0, 0], [-3.0, 0, 0]])
    W = simplex_rows(np.random.default_rng(2), 2, 4)
    w = initial_weights(np.zeros(3), KnnIndex(V), W, 2)
    assert np.allclose(w[0], (3 * W[0] + W[1]) / 4, atol=1e-12)


def test_initial_weights_zero_distance_guard():
    V = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    W = simplex_rows(np.random.default_rng(3), 3, 4)
    w = initial_weights(np.zeros(3), KnnIndex(V), W, 3)
    assert np.array_equal(w[0], W[0])


def test_initial_weights_on_simplex(prior):
    rng = np.random.default_rng(4)
    lo, hi = prior.template.bounds()
    x = rng.uniform(lo, hi, size=(500, 3))
    w = initial_weights(x, KnnIndex(prior.template.vertices), prior.weights, 10)
    assert np.all(w >= 0) and np.allclose(w.sum(1), 1.0, atol=1e-6)


# ------------------------------------------------------------------ backward LBS


def test_lbs_backward_identity():
    x = torch.randn(50, 3, dtype=torch.float64)
    w = torch.softmax(torch.randn(50, 4, dtype=torch.float64), -1)
    I = torch.eye(4, dtype=torch.float64).expand(4, 4, 4)
    y, _ = lbs_backward(x, w, I)
    assert torch.allclose(y, x, atol=1e-15)


def test_lbs_backward_one_hot_round_trip():
    rng = np.random.default_rng(5)
    B = np.stack([rigid(rng) for _ in range(4)])
    x = rng.normal(size=(40, 3))
    w = np.zeros((40, 4))
    w[:, 2] = 1.0
    x_obs = lbs_forward(x, w, B)
    B_inv = torch.from_numpy(np.linalg.inv(B))
    back, _ = lbs_backward(torch.from_numpy(x_obs), torch.from_numpy(w), B_inv)
    assert np.max(np.abs(back.numpy() - x)) <= 1e-9
    direct = (np.linalg.inv(B[2]) @ np.c_[x_obs, np.ones(40)].T).T[:, :3]
    assert np.allclose(back.numpy(), direct, atol=1e-12)


def test_lbs_backward_is_matrix_blend():
    rng = np.random.default_rng(6)
    B_inv = np.stack([rigid(rng) for _ in range(3)])
    x = rng.normal(size=(1, 3))
    w = np.array([[0.2, 0.5, 0.3]])
    M = sum(w[0, i] * B_inv[i] for i in range(3))
    expected = M[:3, :3] @ x[0] + M[:3, 3]
    y, _ = lbs_backward(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(B_inv))
    assert np.allclose(y.numpy()[0], expected, atol=1e-12)


def test_degenerate_blend_raises():
    B_inv = torch.stack([torch.eye(4), torch.diag(torch.tensor([-1.0, -1.0, -1.0, 1.0]))]).double()
    w = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    with pytest.raises(DegenerateBlend, match="degenerate blend"):
        lbs_backward(torch.zeros(1, 3, dtype=torch.float64), w, B_inv)


# ------------------------------------------------------------------ iterative deformation


def test_fixed_point_network():
    rng = np.random.default_rng(7)
    B_inv = torch.from_numpy(np.stack([rigid(rng) for _ in range(3)]))
    x = torch.from_numpy(rng.normal(size=(20, 3)))
    w0 = torch.from_numpy(simplex_rows(rng, 20, 3))
    res = iterative_backward_deform(x, w0, B_inv, lambda xt: w0, iters=3)
    for xt in res.trajectory[1:]:
        assert torch.equal(xt, res.trajectory[0])
    expected, _ = lbs_backward(x, w0, B_inv)
    assert torch.equal(res.x_cnl, expected)
    assert torch.equal(res.w_final, w0)


def test_one_hot_consistency():
    rng = np.random.default_rng(8)
    B_inv = torch.from_numpy(np.stack([rigid(rng) for _ in range(3)]))
    x = torch.from_numpy(rng.normal(size=(10, 3)))
    onehot = torch.zeros(10, 3, dtype=torch.float64)
    onehot[:, 1] = 1
    res = iterative_backward_deform(x, onehot, B_inv, lambda xt: onehot, iters=3)
    expected = x @ B_inv[1, :3, :3].T + B_inv[1, :3, 3]
    assert torch.allclose(res.x_cnl, expected, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_identity_pose_invariance(seed):
    gen = torch.Generator().manual_seed(seed)
    net = SkinningNet(5, hidden=16, n_freqs=3, generator=gen).double()
    x = torch.randn(30, 3, generator=gen, dtype=torch.float64)
    w0 = torch.softmax(torch.randn(30, 5, generator=gen, dtype=torch.float64), -1)
    I = torch.eye(4, dtype=torch.float64).expand(5, 4, 4)
    res = iterative_backward_deform(x, w0, I, net, iters=3)
    assert torch.allclose(res.x_cnl, x, atol=1e-14)


def test_skinning_net_simplex_and_determinism():
    a = SkinningNet(24, hidden=32, generator=torch.Generator().manual_seed(3))
    b = SkinningNet(24, hidden=32, generator=torch.Generator().manual_seed(3))
    x = torch.randn(100, 3)
    wa, wb = a(x), b(x)
    assert torch.all(wa >= 0) and torch.allclose(wa.sum(-1), torch.ones(100), atol=1e-6)
    assert torch.equal(wa, wb)
    assert len(a.layers) == 4


def test_deform_on_posed_body(prior):
    rng = np.random.default_rng(9)
    rots = rng.normal(scale=0.3, size=(prior.n_joints, 3))
    B = forward_kinematics(prior.skeleton, Pose(rots, np.zeros(3)))
    posed = lbs_forward(prior.template.vertices, prior.weights, B)
    idx = rng.choice(len(posed), 50, replace=False)
    # at posed template vertices the KNN weights are the vertex's own prior weights
    w0 = initial_weights(posed[idx], KnnIndex(posed), prior.weights, 10)
    assert np.array_equal(w0, prior.weights[idx])
    B_inv = torch.from_numpy(np.linalg.inv(B))
    res = iterative_backward_deform(torch.from_numpy(posed[idx]), torch.from_numpy(w0), B_inv,
                                    lambda xt: torch.from_numpy(w0), iters=3)
    # matrix-blend inverse is not the exact inverse of blended forward LBS, but close for mild poses
    err = np.linalg.norm(res.x_cnl.numpy() - prior.template.vertices[idx], axis=1)
    assert np.median(err) < 0.02


def test_iters_must_be_positive():
    with pytest.raises(ValueError):
        iterative_backward_deform(torch.zeros(1, 3), torch.ones(1, 1), torch.eye(4)[None], lambda x: x, iters=0)


def test_config_defaults():
    assert DEFAULT_CONFIG["deform"] == {"knn_k": 10, "iters": 3}
