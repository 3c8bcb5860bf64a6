import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmd import diffcore as dc
from lmd.datagen import LongTailSpec, split, synth_longtail
from lmd.icc import (ClassMoments, IccConfig, attraction_psi, e_step, ema_moments,
                     estimate_class_moments, fdc_loss, m_step, psd_cholesky, repulsion_phi,
                     resampled_real_bank, run_icc, vfc_sample)
from lmd.rrl import Stage1Config, train_stage1

from _oracles import central_diff, ce_ref, mlp_features, rel_err


def _moments(mu, sigma, ridge=0.0):
    mu = np.asarray(mu, float)
    return ClassMoments.from_sigma(mu, np.asarray(sigma, float), np.ones(len(mu)), ridge)


# moments ----------------------------------------------------------------------------------

def test_two_sample_moments():
    m = estimate_class_moments(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([0, 0]), 1)
    assert m.mu.tolist() == [[1.0, 1.0]]
    assert m.sigma[0].tolist() == [[2.0, 2.0], [2.0, 2.0]]


def test_single_sample_class_falls_back_to_ridge():
    feats = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, -1.0]])
    with pytest.warns(UserWarning):
        m = estimate_class_moments(feats, np.array([0, 0, 1]), 2, ridge=1e-3)
    assert m.mu[1].tolist() == [5.0, -1.0]
    assert np.array_equal(m.sigma[1], 1e-3 * np.eye(2))


def test_empty_class_rejected():
    with pytest.raises(ValueError):
        estimate_class_moments(np.zeros((3, 2)), np.array([0, 0, 2]), 3)


def test_moments_match_numpy_cov():
    rng = np.random.default_rng(0)
    feats, labels = rng.standard_normal((90, 4)), np.arange(90) % 3
    m = estimate_class_moments(feats, labels, 3)
    for k in range(3):
        assert np.allclose(m.sigma[k], np.cov(feats[labels == k].T), atol=1e-12)
        assert np.allclose(m.chol[k] @ m.chol[k].T, m.regularized(k), atol=1e-12)


def test_class_balanced_mode_equalises_standard_error():
    # fixed data; Monte-Carlo only over the resampling stream
    labels = np.repeat(np.arange(8), [700, 362, 187, 97, 51, 26, 13, 7])
    feats = np.random.default_rng(1).standard_normal((len(labels), 2))
    n, trials = len(labels), 300
    bal, uni = [], []
    for t in range(trials):
        bal.append(estimate_class_moments(feats, labels, 8, "class_balanced", seed=t).mu)
        idx = np.random.default_rng([t, 5]).integers(n, size=n)
        if np.bincount(labels[idx], minlength=8).min() == 0:
            continue
        uni.append(estimate_class_moments(feats[idx], labels[idx], 8, "uniform").mu)
    se = lambda mus: np.asarray(mus)[:, :, 0].std(axis=0, ddof=1)  # noqa: E731
    sb, su = se(bal), se(uni)
    assert sb[7] <= 2 * sb[0]
    assert su[7] > 3 * su[0]


def test_ema_moment_cases():
    rng = np.random.default_rng(2)
    a = estimate_class_moments(rng.standard_normal((40, 3)), np.arange(40) % 2, 2)
    b = estimate_class_moments(rng.standard_normal((40, 3)) + 1, np.arange(40) % 2, 2)
    same = ema_moments(a, a)
    assert np.allclose(same.mu, a.mu) and np.allclose(same.sigma, a.sigma)
    zero = ema_moments(a, b, momentum=0.0)
    assert np.array_equal(zero.mu, b.mu) and np.allclose(zero.sigma, b.sigma)
    blend = ema_moments(a, b)
    assert np.allclose(blend.mu, 0.9 * a.mu + 0.1 * b.mu)
    for k in range(2):
        s = blend.regularized(k)
        assert np.allclose(s, s.T) and np.linalg.eigvalsh(s).min() > 0


def test_psd_cholesky_handles_singular_matrices():
    v = np.array([[1.0], [2.0], [0.0]])
    s = v @ v.T
    low = psd_cholesky(s)
    assert np.allclose(low @ low.T, s, atol=1e-12)
    assert np.allclose(low, np.tril(low))


# virtual features ---------------------------------------------------------------------------

def test_zero_covariance_draws_equal_mean():
    m = _moments([[1.0, 2.0], [3.0, -1.0]], np.zeros((2, 2, 2)), ridge=0.0)
    bank = vfc_sample(m, 50, seed=0)
    assert np.array_equal(bank.features[:50], np.tile([1.0, 2.0], (50, 1)))
    assert np.array_equal(bank.features[50:], np.tile([3.0, -1.0], (50, 1)))


def test_moment_recovery_at_reference_r():
    R = 50_000
    mu = np.array([[0.5, -2.0], [3.0, 1.0]])
    sigma = np.stack([np.diag([1.0, 4.0])] * 2)
    bank = vfc_sample(_moments(mu, sigma), R, seed=3)
    assert np.bincount(bank.labels).tolist() == [R, R]
    for k in range(2):
        x = bank.features[bank.labels == k]
        assert np.all(np.abs(x.mean(axis=0) - mu[k]) <= 4 * np.sqrt(np.diag(sigma[k]) / R))
        err = np.linalg.norm(np.cov(x.T) - sigma[k]) / np.linalg.norm(sigma[k])
        assert err <= 0.05


def test_resampled_real_bank_is_balanced_real_data():
    feats = np.arange(20, dtype=float)[:, None]
    labels = np.array([0] * 17 + [1] * 3)
    bank = resampled_real_bank(feats, labels, 2, 100, seed=1)
    assert len(bank) == 200
    assert set(bank.features[bank.labels == 1, 0]) <= {17.0, 18.0, 19.0}
    assert abs(np.mean(bank.labels) - 0.5) < 0.1


# M-step --------------------------------------------------------------------------------------

def _state(in_dim=3, k=2, feat=2, seed=0):
    return dc.init_model(in_dim, k, hidden=4, feature_dim=feat, seed=seed)


def test_m_step_learns_separated_gaussians_and_freezes_encoder():
    m = _moments([[-5.0, 0.0], [5.0, 0.0]], np.stack([np.eye(2)] * 2), ridge=0.0)
    state = _state()
    enc = dc.params_digest(state.encoder_params)
    history = []
    cfg = IccConfig(lr_classifier=0.1, m_epochs=3, R=5000, seed=1)
    m_step(vfc_sample(m, 5000, seed=1), state, cfg, history)
    assert dc.params_digest(state.encoder_params) == enc
    assert history[-1] <= history[0]
    fresh = vfc_sample(m, 5000, seed=99)
    pred = dc.classify(state.classifier_params, fresh.features).data.argmax(axis=1)
    assert np.mean(pred == fresh.labels) >= 0.999


# Mahalanobis terms --------------------------------------------------------------------------

def test_attraction_cases():
    mu = np.array([[0.0, 0.0], [3.0, 1.0]])
    eye = _moments(mu, np.stack([np.eye(2)] * 2))
    assert attraction_psi(mu, [0, 1], eye).item() == 0.0
    z = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, -1.0]])
    y = np.array([0, 1, 1])
    expect = np.mean(np.sum((z - mu[y]) ** 2, axis=1))
    assert attraction_psi(z, y, eye).item() == pytest.approx(expect, rel=1e-12)
    m = _moments(mu[:1].repeat(2, 0), np.stack([np.diag([4.0, 1.0])] * 2), ridge=1e-12)
    assert attraction_psi(np.array([[2.0, 0.0]]), [0], m).item() == pytest.approx(1.0, abs=1e-9)


def test_as_printed_mode_uses_sigma_directly():
    m = _moments([[0.0, 0.0], [1.0, 0.0]], np.stack([np.diag([4.0, 1.0])] * 2), ridge=1e-12)
    assert attraction_psi(np.array([[2.0, 0.0]]), [0], m, "as_printed").item() == 16.0


def test_repulsion_cases():
    mu = np.array([[0.0, 0.0], [4.0, 0.0]])
    m = _moments(mu, np.stack([np.eye(2)] * 2))
    assert repulsion_phi(np.array([[4.0, 0.0]]), [0], m).item() == 0.0
    mid = np.array([[2.0, 0.0], [2.0, 0.0]])
    assert attraction_psi(mid, [0, 1], m).item() == repulsion_phi(mid, [0, 1], m).item()


def test_repulsion_grows_towards_foreign_mean():
    mu = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 5.0]])
    sig = np.stack([np.array([[2.0, 0.3], [0.3, 1.0]])] * 3)
    m = _moments(mu, sig, ridge=1e-4)
    start, target = np.array([0.5, 0.5]), mu[1]
    # monotone while the point stays on the far side of the foreign mean
    vals = [repulsion_phi((start + t * (target - start))[None], [0], m).item()
            for t in np.linspace(0, -1, 10)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_repulsion_needs_two_classes():
    with pytest.raises(ValueError):
        repulsion_phi(np.zeros((1, 2)), [0], _moments([[0.0, 0.0]], [np.eye(2)]))


# FDC loss ------------------------------------------------------------------------------------

def _fdc_fixture():
    rng = np.random.default_rng(5)
    state = _state(3, 3, 2, seed=4)
    feats = rng.standard_normal((30, 2))
    m = estimate_class_moments(feats, np.arange(30) % 3, 3)
    x = rng.standard_normal((4, 3))
    y = np.array([0, 1, 2, 0])
    return state, m, x, y


def test_fdc_lambda_zero_is_ce():
    state, m, x, y = _fdc_fixture()
    loss, parts = fdc_loss(x, y, state, m, IccConfig(lambda_e=0.0))
    params = {k: v.data for k, v in {**state.encoder_params, **state.classifier_params}.items()}
    z = mlp_features(params, x)
    ref = ce_ref(z @ params["cls.w"] + params["cls.b"], y)
    assert loss.item() == pytest.approx(ref, rel=1e-12)


def test_fdc_total_recombines():
    state, m, x, y = _fdc_fixture()
    _, parts = fdc_loss(x, y, state, m, IccConfig(lambda_e=0.37))
    assert abs(parts["total"] - (0.37 * (parts["psi"] - parts["phi"]) + parts["ce"])) <= 1e-12


def test_fdc_gradient_four_samples():
    state, m, x, y = _fdc_fixture()
    cfg = IccConfig(lambda_e=0.5)
    loss, _ = fdc_loss(x, y, state, m, cfg)
    loss.backward()
    assert all(t.grad is None for t in state.classifier_params.values())
    for name, t in state.encoder_params.items():
        numeric = central_diff(lambda: fdc_loss(x, y, state, m, cfg)[0].item(), t.data)
        assert rel_err(t.grad, numeric) <= 1e-4, name


# E-step ---------------------------------------------------------------------------------------

def _small_problem(seed=1):
    ds = synth_longtail(LongTailSpec(4, 120, 10, feature_dim=4, noise_dims=2, seed=seed))
    train, val, test = split(ds, seed=seed)
    state, _ = train_stage1(train, val, Stage1Config(lambda1=0.0, epochs=5, hidden=8,
                                                     feature_dim=4, seed=seed))
    return train, val, test, state


def test_e_step_freezes_classifier():
    train, _, _, state = _small_problem()
    m = estimate_class_moments(dc.features_of(state, train.features), train.labels, 4)
    cls = dc.params_digest(state.classifier_params)
    enc = dc.params_digest(state.encoder_params)
    e_step(train, state, m, IccConfig(lr_encoder=1e-3, max_grad_norm=1.0, e_epochs=1))
    assert dc.params_digest(state.classifier_params) == cls
    assert dc.params_digest(state.encoder_params) != enc


def test_e_step_noop():
    train, _, _, state = _small_problem()
    m = estimate_class_moments(dc.features_of(state, train.features), train.labels, 4)
    enc = dc.params_digest(state.encoder_params)
    e_step(train, state, m, IccConfig(lambda_e=0.0, e_epochs=0))
    assert dc.params_digest(state.encoder_params) == enc


@pytest.mark.xfail(reason="lambda_e * (psi - phi) is unbounded below along feature scaling "
                          "(phi > psi and both grow quadratically), so the step expands "
                          "features and held-out psi rises", strict=False)
def test_e_step_lowers_held_out_attraction():
    wins = 0
    for seed in range(1, 6):
        train, _, test, state = _small_problem(seed)
        m = estimate_class_moments(dc.features_of(state, train.features), train.labels, 4)
        before = attraction_psi(dc.features_of(state, test.features), test.labels, m).item()
        e_step(train, state, m, IccConfig(lr_encoder=3e-4, max_grad_norm=1.0, seed=seed))
        after = attraction_psi(dc.features_of(state, test.features), test.labels, m).item()
        wins += after < before
    assert wins >= 4


# driver --------------------------------------------------------------------------------------

FAST = dict(R=500, m_epochs=2, e_epochs=1, lr_classifier=0.1, lr_encoder=3e-4,
            max_grad_norm=1.0)


def test_single_iteration_trace():
    train, val, _, state = _small_problem()
    out, trace = run_icc(train, val, state, IccConfig(iterations=1, **FAST))
    assert len(trace) == 1 and len(trace.wall_clock) == 1
    assert trace.iterations[0]["iteration"] == 1
    assert set(trace.iterations[0]) >= {"m_loss", "e_loss", "val_bacc", "val_tail"}


def test_run_icc_is_deterministic_and_leaves_input_untouched():
    train, val, _, state = _small_problem()
    digest = dc.params_digest(state.encoder_params)
    cfg = IccConfig(iterations=2, seed=3, **FAST)
    (a, ta), (b, tb) = run_icc(train, val, state, cfg), run_icc(train, val, state, cfg)
    assert ta.to_dict() == tb.to_dict()
    assert dc.params_digest(a.encoder_params) == dc.params_digest(b.encoder_params)
    assert dc.params_digest(state.encoder_params) == digest
    assert all(t2 >= t1 for t1, t2 in zip(ta.wall_clock, ta.wall_clock[1:]))


def test_no_vfc_uses_real_features():
    train, val, _, state = _small_problem()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, trace = run_icc(train, val, state, IccConfig(iterations=1, use_vfc=False, **FAST))
    assert len(trace) == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 5), st.integers(2, 4))
def test_vfc_histogram(k, c):
    rng = np.random.default_rng(k * 10 + c)
    feats = rng.standard_normal((10 * k, c))
    m = estimate_class_moments(feats, np.arange(10 * k) % k, k)
    bank = vfc_sample(m, 37, seed=1)
    assert np.bincount(bank.labels).tolist() == [37] * k
    assert bank.features.shape == (37 * k, c)


def test_config_validation():
    for bad in (dict(iterations=0), dict(R=0), dict(lambda_e=-1), dict(mahalanobis_mode="x"),
                dict(e_step_sampling="x"), dict(moment_momentum=1.0)):
        with pytest.raises(ValueError):
            IccConfig(**bad)


