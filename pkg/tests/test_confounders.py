import numpy as np
import pytest

from cdrdeconf.confounders import (
    AdversarialConfig,
    AdversarialPair,
    CandidateConfounders,
    ConfounderSubspace,
    build_subspaces,
    cdc_candidates,
    cycle_loss,
    discriminator_objective,
    generator_objective,
    hsr_fit,
    lsgan_losses,
    sdc_candidates,
    train_dual_adversarial,
)
from cdrdeconf.data import SyntheticConfig, generate_synthetic
from cdrdeconf.numeric import Layer, MlpParams, grad_check


def _linear(W, b=None):
    d = W.shape[1]
    return MlpParams([Layer(np.array(W, float), np.zeros(d) if b is None else np.array(b, float))])


def _const_disc(dim, value_logit):
    # tanh hidden layer of width 1 whose output is ignored, constant logit
    return MlpParams([Layer(np.zeros((dim, 1)), np.zeros(1), "tanh"), Layer(np.zeros((1, 1)), np.array([value_logit]), "sigmoid")])


def _pair(S, T, H_a, H_b, lam=1.0):
    return AdversarialPair(S, T, H_a, H_b, lam)


# least-squares adversarial losses ------------------------------------------


def test_half_discriminator_losses():
    d = 3
    rng = np.random.default_rng(0)
    p = _pair(_linear(np.eye(d)), _linear(np.eye(d)), _const_disc(d, 0.0), _const_disc(d, 0.0))
    l = lsgan_losses(p, rng.normal(size=(5, d)), rng.normal(size=(5, d)))
    assert l["disc_a"] == pytest.approx(0.5) and l["disc_b"] == pytest.approx(0.5)
    assert l["gen_S"] == pytest.approx(0.25) and l["gen_T"] == pytest.approx(0.25)


def test_perfect_discriminator_has_zero_loss():
    # real rows have a positive first coordinate, generated rows a negative one
    d = 2
    flip = _linear(np.diag([-1.0, 1.0]))
    za = np.abs(np.random.default_rng(1).normal(size=(6, d))) + 0.5
    zb = np.abs(np.random.default_rng(2).normal(size=(6, d))) + 0.5
    sharp = MlpParams([Layer(np.array([[1.0], [0.0]]), np.zeros(1), "tanh"), Layer(np.array([[200.0]]), np.zeros(1), "sigmoid")])
    p = _pair(flip, flip, sharp, sharp)
    l = lsgan_losses(p, za, zb)
    assert l["disc_a"] < 1e-12 and l["disc_b"] < 1e-12


def test_fooled_discriminator_gives_zero_generator_loss():
    d = 3
    rng = np.random.default_rng(3)
    p = _pair(_linear(np.eye(d)), _linear(np.eye(d)), _const_disc(d, 60.0), _const_disc(d, 60.0))
    l = lsgan_losses(p, rng.normal(size=(4, d)), rng.normal(size=(4, d)))
    assert l["gen_S"] < 1e-20 and l["gen_T"] < 1e-20


def test_losses_nonnegative():
    rng = np.random.default_rng(4)
    p = AdversarialPair.init(4, rng, generator_init="random")
    za, zb = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    assert all(v >= 0 for v in lsgan_losses(p, za, zb).values())
    assert cycle_loss(p, za, zb) >= 0


# cycle loss ----------------------------------------------------------------


def test_cycle_exact_inverses():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    p = _pair(_linear(M), _linear(np.linalg.inv(M)), _const_disc(3, 0), _const_disc(3, 0))
    assert cycle_loss(p, rng.normal(size=(4, 3)), rng.normal(size=(4, 3))) < 1e-12


def test_cycle_identity_maps():
    z = np.random.default_rng(6).normal(size=(4, 3))
    p = _pair(_linear(np.eye(3)), _linear(np.eye(3)), _const_disc(3, 0), _const_disc(3, 0))
    assert cycle_loss(p, z, z) == 0.0


def test_cycle_hand_l1():
    z = np.array([[0.5, -0.5]])
    p = _pair(_linear(2 * np.eye(2)), _linear(np.eye(2)), _const_disc(2, 0), _const_disc(2, 0))
    assert cycle_loss(p, z, z) == pytest.approx(2.0)


# gradients -----------------------------------------------------------------


def test_generator_and_discriminator_gradients():
    rng = np.random.default_rng(0)
    p = AdversarialPair.init(4, rng, lam=0.7, hidden=5, generator_init="random")
    za, zb = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    assert grad_check(lambda _: generator_objective(p, za, zb), p.generator_params(), step=1e-6) < 1e-4
    assert grad_check(lambda _: discriminator_objective(p, za, zb), p.discriminator_params(), step=1e-6) < 1e-4


def test_objectives_match_loss_parts():
    rng = np.random.default_rng(1)
    p = AdversarialPair.init(3, rng, lam=0.7, generator_init="random")
    za, zb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    l = lsgan_losses(p, za, zb)
    assert generator_objective(p, za, zb)[0] == pytest.approx(l["gen_S"] + l["gen_T"] + 0.7 * cycle_loss(p, za, zb))
    assert discriminator_objective(p, za, zb)[0] == pytest.approx(l["disc_a"] + l["disc_b"])


# training ------------------------------------------------------------------


def test_adversarial_training_deterministic():
    rng = np.random.default_rng(2)
    za, zb = rng.normal(size=(40, 4)), rng.normal(size=(40, 4))
    cfg = AdversarialConfig(epochs=3, batch_size=8)
    p1, h1 = train_dual_adversarial(za, zb, cfg, seed=9)
    p2, h2 = train_dual_adversarial(za, zb, cfg, seed=9)
    assert all(np.array_equal(p1.arrays()[k], p2.arrays()[k]) for k in p1.arrays())
    assert h1.cycle == h2.cycle and len(h1.cycle) == 4


def test_pair_array_round_trip():
    p = AdversarialPair.init(3, np.random.default_rng(0))
    q = AdversarialPair.from_arrays(p.arrays(), lam=0.5)
    z = np.random.default_rng(1).normal(size=(4, 3))
    assert lsgan_losses(p, z, z) == lsgan_losses(q, z, z)


# candidates ----------------------------------------------------------------


def test_sdc_identical_domains_identity_translator():
    z = np.random.default_rng(3).normal(size=(5, 3))
    p = _pair(_linear(np.eye(3)), _linear(np.eye(3)), _const_disc(3, 0), _const_disc(3, 0))
    ca, cb = sdc_candidates(p, z, z)
    assert np.all(ca == 0) and np.all(cb == 0)


def test_sdc_translation_offset():
    z = np.random.default_rng(4).normal(size=(5, 3))
    b = np.array([0.5, -1.0, 2.0])
    p = _pair(_linear(np.eye(3)), _linear(np.eye(3), b), _const_disc(3, 0), _const_disc(3, 0))
    ca, _ = sdc_candidates(p, z, z)
    assert np.allclose(ca, b)


def test_hsr_hand_case_and_cdc_continuation():
    W_ab, W_ba = hsr_fit(np.eye(2), 2 * np.eye(2), 1.0)
    assert np.allclose(W_ab, np.eye(2))
    cab, _ = cdc_candidates(np.eye(2), 2 * np.eye(2), (W_ab, W_ba))
    assert np.allclose(cab, np.eye(2))


def test_hsr_self_regression_and_limits():
    E = np.random.default_rng(5).normal(size=(30, 4))
    W, _ = hsr_fit(E, E, 1e-10)
    assert np.allclose(W, np.eye(4), atol=1e-8)
    W, _ = hsr_fit(E, E, 1e12)
    assert np.abs(W).max() < 1e-9


def test_cdc_reproduces_targets_with_invertible_design():
    rng = np.random.default_rng(6)
    Ea = rng.normal(size=(4, 4)) + 2 * np.eye(4)
    Eb = rng.normal(size=(4, 4))
    cab, _ = cdc_candidates(Ea, Eb, hsr_fit(Ea, Eb, 1e-12))
    assert np.allclose(cab, Eb, atol=1e-8)


def test_hsr_residual_bound_and_alpha_monotone():
    rng = np.random.default_rng(7)
    Ea, Eb = rng.normal(size=(40, 5)), rng.normal(size=(40, 5))
    norms = []
    for alpha in (0.1, 1, 10, 100):
        W, _ = hsr_fit(Ea, Eb, alpha)
        rhs = Ea.T @ Eb
        res = np.linalg.norm((Ea.T @ Ea + alpha * np.eye(5)) @ W - rhs) / max(1, np.linalg.norm(rhs))
        assert res < 1e-8
        norms.append(np.linalg.norm(W))
    assert all(b <= a for a, b in zip(norms, norms[1:]))


def test_candidates_deterministic():
    rng = np.random.default_rng(8)
    p = AdversarialPair.init(3, rng)
    za, zb = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    a1, b1 = sdc_candidates(p, za, zb)
    a2, b2 = sdc_candidates(p, za, zb)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def _control_ratios(seed):
    ds, gt = generate_synthetic(SyntheticConfig(n_users=500, n_items_a=300, n_items_b=300, beta_sd=0, beta_cd=0), seed)
    Ea, Eb = gt.fused["a"], gt.fused["b"]
    cab, cba = cdc_candidates(Ea, Eb, hsr_fit(Ea, Eb, 1.0))
    cdc = np.linalg.norm(np.vstack([cab, cba]), axis=1).mean()
    pref = np.linalg.norm(np.vstack([Ea, Eb]), axis=1).mean()
    return cdc / pref


def test_null_control_cdc_candidates_small():
    # module invariant: on the confounder-free control the cross-domain
    # candidates are also below 10% of the preference norm
    ratios = [_control_ratios(s) for s in range(5)]
    assert sum(r < 0.1 for r in ratios) >= 3, f"cdc/preference norm ratios {np.round(ratios, 3)}"


# subspaces -----------------------------------------------------------------


def test_repeated_rows_become_centroids():
    rows = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    x = np.repeat(rows, 4, axis=0)
    cand = CandidateConfounders(x, x, x, x)
    sub = build_subspaces(cand, 3, 3, 3, seed=0)
    for c in (sub.sd_a, sub.sd_b, sub.cd):
        assert sorted(map(tuple, c)) == sorted(map(tuple, rows))


def test_default_union_size():
    rng = np.random.default_rng(9)
    cand = CandidateConfounders(*(rng.normal(size=(60, 4)) for _ in range(4)))
    sub = build_subspaces(cand)
    assert sub.sd_a.shape == sub.sd_b.shape == sub.cd.shape == (10, 4)
    assert sub.union("a").shape == (20, 4) and sub.union("b").shape == (20, 4)


def test_missing_candidates_give_empty_blocks():
    rng = np.random.default_rng(10)
    cdc = rng.normal(size=(30, 3))
    sub = build_subspaces(CandidateConfounders(None, None, cdc, cdc), 2, 2, 4)
    assert sub.sd_a.shape == (0, 3)
    assert sub.union("a").shape == (4, 3)
    with pytest.raises(ValueError):
        ConfounderSubspace(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))).union("a")
    again = ConfounderSubspace.from_arrays(sub.arrays())
    assert np.array_equal(again.cd, sub.cd)
