import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrdeconf.numeric import (
    AdamState,
    Layer,
    MlpParams,
    SingularDesignError,
    adam_step,
    grad_check,
    kmeans,
    mlp_backward,
    mlp_forward,
    mlp_grads_to_dict,
    ridge_solve,
    scatter_rows,
    softmax,
)

from oracles import kmeans_objective, ridge_normal_equations


# ridge ---------------------------------------------------------------------


def test_ridge_hand_case():
    W = ridge_solve(np.eye(2), 2 * np.eye(2), 1.0)
    assert np.allclose(W, np.eye(2), atol=1e-14)


def test_ridge_zero_alpha_reproduces_targets():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 5)) + 3 * np.eye(5)
    Y = rng.normal(size=(5, 2))
    assert np.allclose(X @ ridge_solve(X, Y, 0.0), Y, atol=1e-10)


def test_ridge_huge_alpha_shrinks_to_zero():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 3))
    Y = rng.normal(size=(10, 2))
    assert np.abs(ridge_solve(X, Y, 1e12)).max() < 1e-9


def test_ridge_rank_deficient_without_regularization_raises():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    with pytest.raises(SingularDesignError):
        ridge_solve(X, np.ones((3, 1)), 0.0)


def test_ridge_matches_gaussian_elimination_and_residual_bound():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = int(rng.integers(1, 21))
        d = int(rng.integers(1, 9))
        dp = int(rng.integers(1, 5))
        X = rng.normal(size=(m, d))
        Y = rng.normal(size=(m, dp))
        alpha = float(rng.uniform(0.01, 5.0))
        W = ridge_solve(X, Y, alpha)
        ref = ridge_normal_equations(X, Y, alpha)
        assert np.linalg.norm(W - ref) / max(np.linalg.norm(ref), 1e-300) < 1e-8
        rhs = X.T @ Y
        res = np.linalg.norm((X.T @ X + alpha * np.eye(d)) @ W - rhs) / max(1.0, np.linalg.norm(rhs))
        assert res < 1e-8


# kmeans --------------------------------------------------------------------


def test_kmeans_separable_duplicates():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0]])
    res = kmeans(pts, 2, seed=0)
    got = sorted(map(tuple, res.centroids))
    assert got == [(0.0, 0.0), (10.0, 10.0)]
    assert res.objective == 0.0


def test_kmeans_single_cluster_is_mean():
    pts = np.random.default_rng(3).normal(size=(30, 3))
    res = kmeans(pts, 1, seed=0)
    assert np.allclose(res.centroids[0], pts.mean(0))


def test_kmeans_objective_monotone_by_recomputation():
    pts = np.random.default_rng(4).normal(size=(50, 4))
    full = kmeans(pts, 5, seed=7)
    objs = []
    for t in range(1, full.n_iter + 1):
        r = kmeans(pts, 5, max_iters=t, seed=7)
        d2 = ((pts[:, None, :] - r.centroids[None]) ** 2).sum(-1)
        a = d2.argmin(1)
        objs.append(kmeans_objective(pts, r.centroids, a))
    assert all(b <= a + 1e-12 for a, b in zip(objs, objs[1:]))
    assert all(b <= a + 1e-12 for a, b in zip(full.history, full.history[1:]))


def test_kmeans_fixed_point_and_determinism():
    pts = np.random.default_rng(5).normal(size=(80, 3))
    a = kmeans(pts, 6, seed=1)
    b = kmeans(pts, 6, seed=1)
    assert np.array_equal(a.centroids, b.centroids)
    d2 = ((pts[:, None, :] - a.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(d2.argmin(1), a.assignments)
    for j in range(6):
        members = pts[a.assignments == j]
        if len(members):
            assert np.allclose(members.mean(0), a.centroids[j])


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


# mlp -----------------------------------------------------------------------


def test_identity_layer_passes_input_through():
    net = MlpParams([Layer(np.eye(3), np.zeros(3))])
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(mlp_forward(net, x), x)


def test_zero_sigmoid_layer_gives_half():
    net = MlpParams([Layer(np.zeros((3, 2)), np.zeros(2), "sigmoid")])
    assert np.all(mlp_forward(net, np.ones((5, 3))) == 0.5)


def test_two_layer_relu_hand_forward():
    W1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.0, 0.5])
    W2 = np.array([[1.0], [3.0]])
    b2 = np.array([-1.0])
    net = MlpParams([Layer(W1, b1, "relu"), Layer(W2, b2)])
    # x=(1,2): hidden pre = (1+4, -1+1+0.5) = (5, 0.5) -> relu same; out = 5 + 1.5 - 1
    assert mlp_forward(net, np.array([[1.0, 2.0]]))[0, 0] == pytest.approx(5.5)


def test_zero_upstream_gives_zero_grads():
    net = MlpParams.init([3, 4, 2], ["tanh", "sigmoid"], np.random.default_rng(0))
    grads, gx = mlp_backward(net, np.ones((2, 3)), np.zeros((2, 2)))
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)
    assert np.all(gx == 0)


def test_identity_layer_weight_grad_is_input_sum():
    x = np.random.default_rng(1).normal(size=(6, 3))
    net = MlpParams([Layer(np.eye(3), np.zeros(3))])
    grads, _ = mlp_backward(net, x, np.ones((6, 3)))
    assert np.allclose(grads[0][0], x.T @ np.ones((6, 3)))
    assert np.allclose(grads[0][1], np.full(3, 6.0))


@pytest.mark.parametrize("acts", [("tanh", "sigmoid"), ("relu", "identity"), ("sigmoid", "tanh")])
def test_mlp_backward_matches_finite_differences(acts):
    rng = np.random.default_rng(2)
    net = MlpParams.init([3, 5, 2], list(acts), rng, std=0.7)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))
    params = net.arrays()

    def loss(_):
        out = mlp_forward(net, x)
        grads, _gx = mlp_backward(net, x, out - target)
        return 0.5 * float(((out - target) ** 2).sum()), mlp_grads_to_dict(grads)

    assert grad_check(loss, params, step=1e-6) < 1e-4


# adam ----------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.001)
    assert p["w"][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_two_steps_hand_recurrence():
    p = {"w": np.array([0.5])}
    s = AdamState()
    g = np.array([0.3])
    adam_step(p, {"w": g}, s, 0.01)
    adam_step(p, {"w": g}, s, 0.01)
    assert s.step == 2
    m1, v1 = 0.1 * 0.3, 0.001 * 0.09
    m2, v2 = 0.9 * m1 + 0.1 * 0.3, 0.999 * v1 + 0.001 * 0.09
    assert s.m["w"][0] == pytest.approx(m2, rel=1e-12)
    assert s.v["w"][0] == pytest.approx(v2, rel=1e-12)
    w = 0.5
    for t, (m, v) in enumerate([(m1, v1), (m2, v2)], start=1):
        w -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p["w"][0] == pytest.approx(w, rel=1e-12)


# grad_check ----------------------------------------------------------------


def test_grad_check_exact_quadratic():
    params = {"p": np.random.default_rng(0).normal(size=5)}
    assert grad_check(lambda q: (0.5 * float(q["p"] @ q["p"]), {"p": q["p"].copy()}), params) < 1e-10


def test_grad_check_detects_doubled_gradient():
    params = {"p": np.random.default_rng(0).normal(size=5)}
    err = grad_check(lambda q: (0.5 * float(q["p"] @ q["p"]), {"p": 2 * q["p"]}), params)
    assert err == pytest.approx(1.0, abs=1e-6)


# misc kernels --------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(xs, c):
    x = np.array(xs)
    assert softmax(x).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(softmax(x), softmax(x + c), atol=1e-12)


def test_scatter_rows_matches_add_at():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 7, 40)
    vals = rng.normal(size=(40, 3))
    ref = np.zeros((7, 3))
    np.add.at(ref, idx, vals)
    assert np.allclose(scatter_rows(idx, vals, 7), ref)
