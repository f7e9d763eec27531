import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdrdeconf.backbone import bce_with_logits
from cdrdeconf.data import TrainingSamples
from cdrdeconf.deconfounder import (
    CandidateScorer,
    ConfounderContext,
    FinetuneConfig,
    PredictionNetwork,
    backdoor_input,
    confounder_weights,
    finetune,
    finetune_loss,
    finetune_params,
    mixture_vector,
    pair_logits,
    predict,
    selection_logits,
)
from cdrdeconf.numeric import Layer, MlpParams, grad_check, softmax

from oracles import softmax_list
from toys import toy_phase3, toy_split


def _net(dim=3, e=5, seed=0, **kw):
    return PredictionNetwork.init(dim, np.random.default_rng(seed), e=e, q=2, hidden=(4, 3), **kw)


def _zero_selection(net):
    for w in (net.W_u, net.W_uc, net.W_v, net.W_vc):
        w[...] = 0.0
    return net


# selection weights ---------------------------------------------------------


def test_zero_selection_is_uniform():
    net = _zero_selection(_net())
    ctx = ConfounderContext(np.random.default_rng(1).normal(size=(4, 3)))
    phi = confounder_weights(np.ones(3), np.ones(3), ctx, net)
    assert np.allclose(phi, 0.25)


def test_singleton_weight_is_one():
    ctx = ConfounderContext(np.array([[1.0, 2.0, 3.0]]))
    assert confounder_weights(np.ones(3), -np.ones(3), ctx, _net()) == pytest.approx([1.0])


def test_hand_two_confounder_weights():
    net = PredictionNetwork(
        np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1)), np.ones((1, 1)), np.zeros((3, 2)),
        MlpParams([Layer(np.zeros((2, 1)), np.zeros(1))]),
    )
    ctx = ConfounderContext(np.array([[0.0], [math.log(3.0)]]))
    lu, lv = selection_logits(np.array([1.0]), np.array([1.0]), ctx.centroids, net)
    assert np.allclose(lu, [[0.0, math.log(3.0)]]) and np.allclose(lv, 0.0)
    phi = confounder_weights(np.array([1.0]), np.array([1.0]), ctx, net)
    assert np.allclose(phi, [0.375, 0.625])
    # independent oracle on plain floats
    ref = [0.5 * a + 0.5 * b for a, b in zip(softmax_list([0.0, math.log(3.0)]), softmax_list([0.0, 0.0]))]
    assert np.allclose(phi, ref)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    arrays(np.float64, (3,), elements=st.floats(-5, 5)),
    st.integers(1, 6),
    st.integers(0, 10_000),
)
def test_weights_sum_to_one(eu, ev, J, seed):
    rng = np.random.default_rng(seed)
    net = _net(seed=seed, std=1.0)
    ctx = ConfounderContext(rng.normal(size=(J, 3)) * 3)
    phi = confounder_weights(eu, ev, ctx, net)
    assert abs(phi.sum() - 1.0) < 1e-6
    assert np.all(phi >= 0)


def test_weights_shift_invariant():
    rng = np.random.default_rng(2)
    net = _net(std=1.0)
    ctx = ConfounderContext(rng.normal(size=(5, 3)))
    eu, ev = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    lu, lv = selection_logits(eu, ev, ctx.centroids, net)
    shifted = 0.5 * softmax(lu + 3.0, axis=1) + 0.5 * softmax(lv - 7.0, axis=1)
    assert np.allclose(confounder_weights(eu, ev, ctx, net), shifted, atol=1e-14)


# backdoor mixture ----------------------------------------------------------


def test_singleton_mixture_is_centroid():
    net = _net()
    c0 = np.array([0.5, -1.0, 2.0])
    ctx = ConfounderContext(c0[None])
    eu, ev = np.array([1.0, 0.0, 1.0]), np.array([0.0, 2.0, -1.0])
    assert np.allclose(mixture_vector(eu, ev, ctx, net), c0)
    assert np.allclose(backdoor_input(eu, ev, ctx, net), np.concatenate([eu, ev, c0]) @ net.W_fc)


def test_uniform_mixture_is_scaled_mean():
    net = _zero_selection(_net())
    C = np.random.default_rng(3).normal(size=(4, 3))
    mix = mixture_vector(np.ones(3), np.ones(3), ConfounderContext(C), net)
    assert np.allclose(mix, C.sum(0) / 16)
    # renormalised variant drops the prior factor
    mix = mixture_vector(np.ones(3), np.ones(3), ConfounderContext(C, "renormalized"), net)
    assert np.allclose(mix, C.mean(0))


def test_zero_centroids_remove_confounder_path():
    eu, ev = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.0, 1.0])
    ctx = ConfounderContext(np.zeros((3, 3)))
    a, b = _net(seed=0), _net(seed=0)
    b.W_u[...] = 5.0
    b.W_vc[...] = -2.0
    assert np.all(mixture_vector(eu, ev, ctx, a) == 0)
    assert np.allclose(backdoor_input(eu, ev, ctx, a), backdoor_input(eu, ev, ctx, b))


def test_mixture_coefficients_bounded():
    J = 3
    net = _net(std=1.0)
    ctx = ConfounderContext(np.eye(J))
    rng = np.random.default_rng(4)
    for _ in range(20):
        coef = mixture_vector(rng.normal(size=3), rng.normal(size=3), ctx, net)
        assert np.all(coef >= 0) and np.all(coef <= 1 / J + 1e-15)
        assert coef.sum() == pytest.approx(1 / J)


def test_empty_or_bad_context_rejected():
    with pytest.raises(ValueError):
        ConfounderContext(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        ConfounderContext(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        ConfounderContext(np.zeros((2, 3)), "softmax")


# prediction ----------------------------------------------------------------


def test_zero_final_layer_gives_half():
    net = _net()
    net.mlp.layers[-1].weight[...] = 0.0
    net.mlp.layers[-1].bias[...] = 0.0
    assert np.all(predict(np.random.default_rng(5).normal(size=(6, 5)), net) == 0.5)


def test_final_bias_monotone_and_open_interval():
    net = _net()
    q = np.random.default_rng(6).normal(size=(8, 5))
    prev = predict(q, net)
    assert np.all((prev > 0) & (prev < 1))
    for _ in range(3):
        net.mlp.layers[-1].bias[...] += 0.5
        cur = predict(q, net)
        assert np.all(cur > prev)
        prev = cur


def test_hand_one_layer_prediction():
    net = PredictionNetwork(*(np.zeros((1, 1)) for _ in range(4)), np.zeros((3, 2)), MlpParams([Layer(np.array([[1.0], [1.0]]), np.zeros(1))]))
    assert predict(np.array([0.5, 1.5]), net) == pytest.approx(0.8807970779778823, abs=1e-12)


def test_scorer_matches_per_row_prediction():
    rng = np.random.default_rng(7)
    net = _net(std=0.7)
    for ctx in (ConfounderContext(rng.normal(size=(4, 3))), ConfounderContext(rng.normal(size=(4, 3)), "renormalized"), ConfounderContext(rng.normal(size=(1, 3)), coarse=True)):
        Eu, Ev = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
        users, items = np.array([0, 0, 3, 4, 4]), np.array([5, 1, 1, 0, 2])
        got = CandidateScorer(Eu, Ev, ctx, net).scores(users, items)
        ref = [predict(backdoor_input(Eu[u], Ev[i], ctx, net), net) for u, i in zip(users, items)]
        assert np.allclose(got, ref, atol=1e-12)


# fine-tuning loss ----------------------------------------------------------


def test_half_predictions_cost_two_ln2():
    rng = np.random.default_rng(8)
    net = _net()
    net.mlp.layers[-1].weight[...] = 0.0
    net.mlp.layers[-1].bias[...] = 0.0
    z, _ = pair_logits(rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), np.array([0, 0]), np.array([1, 3]), ConfounderContext(np.ones((2, 3))), net)
    loss, _ = bce_with_logits(z, np.array([1.0, 0.0]))
    assert loss.sum() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_half_predictions_full_loss_sums_both_domains():
    bb, nets, ctx, _ = toy_phase3()
    for n in nets.values():
        n.mlp.layers[-1].weight[...] = 0.0
        n.mlp.layers[-1].bias[...] = 0.0
    one = TrainingSamples(np.array([0]), np.array([0]), np.array([[1]]))
    loss, _ = finetune_loss(bb, nets, ctx, {"a": one, "b": one})
    assert loss == pytest.approx(4 * math.log(2), abs=1e-12)


def test_perfect_predictions_drive_loss_to_zero():
    # logit = 10 * (sum of item embedding): positives +1 rows, negatives -1 rows
    d = e = 3
    W_fc = np.zeros((3 * d, e))
    W_fc[d : 2 * d] = np.eye(d)
    net = PredictionNetwork(*(np.zeros((d, d)) for _ in range(4)), W_fc, MlpParams([Layer(np.full((e, 1), 10.0), np.zeros(1))]))
    Ev = np.vstack([np.ones(d), -np.ones(d)])
    z, _ = pair_logits(np.zeros((1, d)), Ev, np.array([0, 0]), np.array([0, 1]), ConfounderContext(np.ones((2, d))), net)
    loss, _ = bce_with_logits(z, np.array([1.0, 0.0]))
    assert loss.sum() < 1e-10


@pytest.mark.parametrize("mode", ["literal", "renormalized", "coarse"])
def test_phase3_gradients(mode):
    bb, nets, ctx, batch = toy_phase3(mode)
    params = finetune_params(bb, nets)
    assert grad_check(lambda _: finetune_loss(bb, nets, ctx, batch), params, step=1e-6) < 1e-4


def test_finetune_deterministic_and_reduces_loss():
    results = []
    for _ in range(2):
        bb, nets, ctx, batch = toy_phase3()
        split = toy_split()
        hist = []
        finetune(bb, nets, ctx, split, FinetuneConfig(epochs=4, batch_size=4, lr=0.01, negatives=2), seed=1, history=hist)
        results.append((hist, finetune_params(bb, nets)))
    assert results[0][0] == results[1][0]
    assert all(np.array_equal(results[0][1][k], results[1][1][k]) for k in results[0][1])
    assert results[0][0][-1] < results[0][0][0]


def test_network_array_round_trip():
    net = _net()
    again = PredictionNetwork.from_arrays(net.arrays("p."), "p.")
    q = np.random.default_rng(9).normal(size=(3, 5))
    assert np.array_equal(predict(q, net), predict(q, again))
