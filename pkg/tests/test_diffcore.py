import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lmd import diffcore as dc
from lmd.diffcore import NumericError, ShapeError, StateError, Tensor

from _gradcases import ALL_CASES, max_rel_error
from _oracles import central_diff, rel_err

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# matmul -------------------------------------------------------------------------

def test_matmul_identity_and_hand_value():
    a = np.array([[3.0, 4], [5, 6]])
    assert np.array_equal(dc.matmul(np.eye(2), a).data, a)
    assert dc.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    ta = Tensor(a, requires_grad=True)
    dc.total(dc.matmul(ta, b)).backward()
    numeric = central_diff(lambda: float(np.sum(a @ b)), a)
    assert rel_err(ta.grad, numeric) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax / cross-entropy / KL --------------------------------------------------------

def test_softmax_cases():
    assert np.allclose(dc.softmax_rows(Tensor(np.zeros((1, 3)))).data, 1 / 3)
    out = dc.softmax_rows(Tensor(np.array([[1000.0, 0.0]]))).data
    assert np.all(np.isfinite(out))
    assert abs(out[0, 0] - 1) < 1e-12 and abs(out[0, 1]) < 1e-12


@given(arrays(np.float64, (4, 6), elements=finite))
def test_softmax_rows_sum_to_one(z):
    assert np.allclose(dc.softmax_rows(Tensor(z)).data.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_limits():
    logits = np.full((3, 4), -500.0)
    labels = np.array([0, 2, 3])
    logits[np.arange(3), labels] = 500.0
    assert dc.cross_entropy(Tensor(logits), labels).item() < 1e-12
    assert abs(dc.cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 1]).item()
               - np.log(4)) < 1e-12


def test_cross_entropy_grad_8x5():
    rng = np.random.default_rng(1)
    assert max_rel_error(ALL_CASES["cross_entropy"], rng) < 1e-5


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        dc.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_kl_closed_forms():
    p = Tensor(np.array([[0.2, 0.3, 0.5]]))
    assert abs(dc.kl_rows(p, p).item()) < 1e-15
    kl = dc.kl_rows(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.5, 0.5]]))).item()
    assert abs(kl - np.log(2)) < 1e-12


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(5), size=1000)
    q = rng.dirichlet(np.ones(5), size=1000)
    for i in range(1000):
        assert dc.kl_rows(Tensor(p[i:i + 1]), Tensor(q[i:i + 1])).item() >= 0


def test_kl_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        dc.kl_rows(Tensor(np.array([[0.5, 0.6]])), Tensor(np.array([[0.5, 0.5]])))


def test_kl_clamps_zero_q():
    val = dc.kl_rows(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0]]))).item()
    assert np.isfinite(val) and abs(val - (-np.log(1e-12))) < 1e-9


# Gram matrices and quadratic forms ----------------------------------------------------------

def test_gram_sample_cases():
    assert np.array_equal(dc.gram_sample(Tensor(np.eye(2))).data, np.eye(2))
    out = dc.gram_sample(Tensor(np.array([[1.0, 1], [2, 2]]))).data
    assert out.tolist() == [[2, 4], [4, 8]]
    z = np.random.default_rng(3).standard_normal((6, 4))
    g = dc.gram_sample(Tensor(z)).data
    assert np.max(np.abs(g - g.T)) <= 1e-12


def test_gram_channel_cases():
    assert np.array_equal(dc.gram_channel(Tensor(np.eye(2))).data, np.eye(2))
    assert dc.gram_channel(Tensor(np.array([[1.0, 2]]))).data.tolist() == [[1, 2], [2, 4]]


@given(arrays(np.float64, (5, 3), elements=finite))
def test_gram_traces_agree(z):
    a = np.trace(dc.gram_channel(Tensor(z)).data)
    b = np.trace(dc.gram_sample(Tensor(z)).data)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_quadratic_form_cases():
    mu = np.array([0.5, -1.0])
    assert dc.quadratic_form(np.array([[0.5, -1.0]]), mu, np.eye(2)).data.tolist() == [0.0]
    x = np.array([[1.0, 2.0], [-3.0, 0.5]])
    expect = np.sum((x - mu) ** 2, axis=1)
    assert np.allclose(dc.quadratic_form(x, mu, np.eye(2)).data, expect)
    q = dc.quadratic_form(np.array([[2.0, 0]]), np.zeros(2), np.diag([3.0, 1.0]))
    assert q.data.tolist() == [12.0]


def test_quadratic_form_rejects_asymmetric():
    with pytest.raises(ValueError):
        dc.quadratic_form(np.ones((1, 2)), np.zeros(2), np.array([[1.0, 2.0], [0.0, 1.0]]))


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng([11, len(name)])
    for _ in range(5):
        assert max_rel_error(ALL_CASES[name], rng) < 1e-4


# autodiff mechanics ------------------------------------------------------------------------

def test_gradient_accumulates_over_shared_use():
    x = Tensor(np.array([3.0]), requires_grad=True)
    dc.total(x * x + x).backward()
    assert x.grad.tolist() == [7.0]


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    dc.total(x * x.detach()).backward()
    assert x.grad.tolist() == [2.0]


def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))


# SGD and EMA -----------------------------------------------------------------------------

def _one_param_state(value: float) -> dc.ModelState:
    state = dc.init_model(2, 2, hidden=2, feature_dim=2, seed=0)
    state.classifier_params["cls.b"].data = np.array([value, value])
    return state


def test_sgd_one_step_arithmetic():
    state = _one_param_state(1.0)
    for t in state.params_for("classifier").values():
        t.grad = np.zeros_like(t.data)
    state.classifier_params["cls.b"].grad = np.array([2.0, 2.0])
    dc.sgd_step(state, "classifier", dc.SgdConfig(0.1))
    assert np.allclose(state.classifier_params["cls.b"].data, 0.8)


def test_sgd_classifier_only_leaves_encoder_bit_identical():
    state = dc.init_model(3, 2, hidden=4, feature_dim=3, seed=1)
    before = dc.params_digest(state.encoder_params)
    x = np.random.default_rng(0).standard_normal((5, 3))
    loss = dc.cross_entropy(dc.classify(state.classifier_params,
                                        dc.encode(state.encoder_params, x)), [0, 1, 0, 1, 1])
    loss.backward()
    dc.sgd_step(state, "classifier", dc.SgdConfig(0.5))
    assert dc.params_digest(state.encoder_params) == before


def test_sgd_decreases_1d_quadratic():
    state = _one_param_state(3.0)
    b = state.classifier_params["cls.b"]
    losses = []
    for _ in range(10):
        for t in state.params_for("classifier").values():
            t.grad = None
        loss = dc.total(dc.square(b - 1.0))
        state.classifier_params["cls.w"].grad = np.zeros_like(state.classifier_params["cls.w"].data)
        loss.backward()
        dc.sgd_step(state, "classifier", dc.SgdConfig(0.01))
        losses.append(loss.item())
    assert all(b2 < b1 for b1, b2 in zip(losses, losses[1:]))


def test_sgd_without_gradient_is_state_error():
    with pytest.raises(StateError):
        dc.sgd_step(dc.init_model(2, 2, 2, 2), "encoder", dc.SgdConfig(0.1))


def test_sgd_clipping_bounds_update():
    state = _one_param_state(0.0)
    for t in state.params_for("classifier").values():
        t.grad = np.zeros_like(t.data)
    state.classifier_params["cls.b"].grad = np.array([30.0, 40.0])
    norm = dc.sgd_step(state, "classifier", dc.SgdConfig(1.0, max_grad_norm=5.0))
    assert norm == 50.0
    assert np.allclose(state.classifier_params["cls.b"].data, [-3.0, -4.0])


def test_ema_one_step_and_fixed_point():
    state = dc.init_model(2, 2, hidden=2, feature_dim=2, seed=0)
    state.teacher_classifier_params["cls.b"].data = np.zeros(2)
    state.classifier_params["cls.b"].data = np.ones(2)
    before = state.teacher_encoder_params["enc.w1"].data.copy()
    dc.ema_update(state)
    assert np.allclose(state.teacher_classifier_params["cls.b"].data, 0.01)
    assert np.array_equal(state.teacher_encoder_params["enc.w1"].data, before)


def test_ema_geometric_decay():
    state = dc.init_model(2, 2, hidden=2, feature_dim=2, seed=0)
    state.teacher_classifier_params["cls.b"].data = np.array([5.0, -2.0])
    gap0 = np.abs(state.teacher_classifier_params["cls.b"].data
                  - state.classifier_params["cls.b"].data)
    for _ in range(1000):
        dc.ema_update(state)
    gap = np.abs(state.teacher_classifier_params["cls.b"].data
                 - state.classifier_params["cls.b"].data)
    assert np.all(gap <= 0.99 ** 1000 * gap0 + 1e-9)


@settings(max_examples=20)
@given(st.floats(0.01, 0.999))
def test_ema_momentum_validated(m):
    assert dc.init_model(2, 2, 2, 2, ema_momentum=m).ema_momentum == m


def test_ema_momentum_out_of_range():
    with pytest.raises(ValueError):
        dc.init_model(2, 2, 2, 2, ema_momentum=1.0)
