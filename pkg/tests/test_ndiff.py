import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from caire import ndiff
from caire.ndiff import (
    AmsGradState,
    NonFiniteError,
    ParamStore,
    Prior,
    amsgrad_step,
    bernoulli_loglik,
    bernoulli_logit_loglik,
    bernoulli_logit_loglik_grad,
    checkpoint_bytes,
    conv1d,
    conv1d_backward,
    finite_diff_check,
    gaussian_loglik,
    gaussian_loglik_grad,
    has_ties,
    linear,
    linear_backward,
    lognormal_logprior,
    lognormal_logprior_grad,
    maxpool_backward,
    maxpool_positions,
    parse_checkpoint,
    selu,
    selu_grad,
    sigmoid,
)

FD_TOL = 1e-6


def _check(loss, params: dict, grads: dict, **kw):
    report = finite_diff_check(lambda p: float(loss(p)), ParamStore(params), grads, **kw)
    assert report.n_checked > 0
    return report


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(6, 1))
    np.testing.assert_array_equal(conv1d(x, np.ones((1, 1, 1)), np.zeros(1)), x)


def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -1.0, 2.0])
    out = conv1d(np.zeros((7, 4)), np.ones((3, 4, 3)), b)
    np.testing.assert_array_equal(out, np.broadcast_to(b, (5, 3)))


def test_conv_kernel_longer_than_input():
    with pytest.raises(ValueError):
        conv1d(np.zeros((2, 4)), np.zeros((3, 4, 1)), np.zeros(1))


def test_conv_gradients():
    rng = np.random.default_rng(1)
    x, W, b = rng.normal(size=(6, 4)), rng.normal(size=(3, 4, 2)), rng.normal(size=2)
    R = rng.normal(size=(4, 2))
    dx, dW, db = conv1d_backward(x, W, R)
    rep = _check(lambda p: np.sum(conv1d(p["x"], p["W"], p["b"]) * R), {"x": x, "W": W, "b": b},
                 {"x": dx, "W": dW, "b": db})
    assert rep.max_rel_error < FD_TOL


def test_conv_batched_matches_single():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=(3, 8, 4)), rng.normal(size=(5, 4, 2)), rng.normal(size=2)
    out = conv1d(x, W, b)
    for i in range(3):
        np.testing.assert_allclose(out[i], conv1d(x[i], W, b), rtol=1e-14)


def test_selu_values():
    lam_alpha = ndiff.SELU_LAMBDA * ndiff.SELU_ALPHA
    assert selu(0.0) == 0.0
    assert selu(1.0) == pytest.approx(1.0507009873554805, rel=1e-15)
    assert selu(-60.0) == pytest.approx(-lam_alpha, rel=1e-15)
    assert lam_alpha == pytest.approx(1.7581, abs=1e-4)


def test_selu_gradient():
    x = np.array([-2.0, -0.3, 0.4, 1.7])
    rep = _check(lambda p: np.sum(selu(p["x"])), {"x": x}, {"x": selu_grad(x)})
    assert rep.max_rel_error < FD_TOL


def test_maxpool_single_row():
    x = np.array([[1.0, -2.0, 3.0]])
    out, idx = maxpool_positions(x)
    np.testing.assert_array_equal(out, x[0])
    np.testing.assert_array_equal(idx, [0, 0, 0])


@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**16))
def test_maxpool_permutation_invariant(L, C, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(L, C))
    np.testing.assert_array_equal(maxpool_positions(x)[0], maxpool_positions(x[rng.permutation(L)])[0])


def test_maxpool_ties_go_to_lowest_index():
    x = np.array([[0.0], [2.0], [2.0], [1.0]])
    _, idx = maxpool_positions(x)
    assert idx[0] == 1
    assert has_ties(x)
    assert not has_ties(np.array([[0.0], [2.0]]))


def test_maxpool_mask_excludes_positions():
    x = np.array([[0.0], [5.0], [1.0]])
    out, idx = maxpool_positions(x, np.array([True, False, True]))
    assert out[0] == 1.0 and idx[0] == 2


def test_maxpool_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 3))
    R = rng.normal(size=3)
    out, idx = maxpool_positions(x)
    dx = maxpool_backward(R, idx, 6)
    rep = _check(lambda p: np.sum(maxpool_positions(p["x"])[0] * R), {"x": x}, {"x": dx},
                 kink_fn=lambda p: maxpool_positions(p["x"])[1].tolist())
    assert rep.max_rel_error < FD_TOL


def test_linear_gradient():
    rng = np.random.default_rng(4)
    x, W, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    R = rng.normal(size=(5, 2))
    dx, dW, db = linear_backward(x, W, R)
    rep = _check(lambda p: np.sum(linear(p["x"], p["W"], p["b"]) * R), {"x": x, "W": W, "b": b},
                 {"x": dx, "W": dW, "b": db})
    assert rep.max_rel_error < FD_TOL


def test_sigmoid_and_bernoulli():
    assert sigmoid(0.0) == 0.5
    assert bernoulli_loglik(1, 0.5) == pytest.approx(math.log(0.5), rel=1e-15)
    np.testing.assert_allclose(sigmoid(np.array([-800.0, 800.0])), [0.0, 1.0])
    z = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(bernoulli_logit_loglik(1, z), bernoulli_loglik(1, sigmoid(z)), rtol=1e-12)
    np.testing.assert_allclose(bernoulli_logit_loglik(0, z), bernoulli_loglik(0, sigmoid(z)), rtol=1e-12)


def test_sigmoid_gradient():
    z = np.array([-3.0, -0.2, 0.5, 2.5])
    rep = _check(lambda p: np.sum(sigmoid(p["z"])), {"z": z}, {"z": sigmoid(z) * (1 - sigmoid(z))})
    assert rep.max_rel_error < FD_TOL


def test_bernoulli_logit_gradient():
    z = np.array([-3.0, -0.2, 0.5, 2.5])
    s = np.array([1.0, 0.0, 1.0, 0.0])
    rep = _check(lambda p: np.sum(bernoulli_logit_loglik(s, p["z"])), {"z": z},
                 {"z": bernoulli_logit_loglik_grad(s, z)})
    assert rep.max_rel_error < FD_TOL


def test_gaussian_loglik_values():
    tau = 0.7
    assert gaussian_loglik(1.3, 1.3, tau) == pytest.approx(-math.log(tau * math.sqrt(2 * math.pi)), rel=1e-15)
    ys = np.array([-1.0, 0.2, 3.0])
    np.testing.assert_allclose(gaussian_loglik(ys, 0.5, 1.5), stats.norm.logpdf(ys, 0.5, 1.5), rtol=1e-13)
    with pytest.raises(ValueError):
        gaussian_loglik(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        gaussian_loglik(0.0, 0.0, -1.0)


def test_gaussian_gradients():
    y, mu, tau = np.array([0.3, -1.2]), np.array([0.1, 0.4]), np.array([0.8, 1.3])
    dy, dmu, dtau = gaussian_loglik_grad(y, mu, tau)
    rep = _check(lambda p: np.sum(gaussian_loglik(p["y"], p["mu"], p["tau"])),
                 {"y": y, "mu": mu, "tau": tau}, {"y": dy, "mu": dmu, "tau": dtau})
    assert rep.max_rel_error < FD_TOL


def test_lognormal_prior():
    x = np.array([0.2, 1.0, 3.5])
    np.testing.assert_allclose(lognormal_logprior(x, -1.0, 2.0),
                               stats.lognorm.logpdf(x, s=2.0, scale=math.exp(-1.0)), rtol=1e-13)
    rep = _check(lambda p: np.sum(lognormal_logprior(p["x"], -1.0, 2.0)), {"x": x},
                 {"x": lognormal_logprior_grad(x, -1.0, 2.0)})
    assert rep.max_rel_error < FD_TOL
    with pytest.raises(ValueError):
        lognormal_logprior(np.array([0.0]), 0.0, 1.0)


def test_param_store_priors_match_scipy():
    ps = ParamStore({"g": [0.5, -2.0], "log_tau": -0.3},
                    {"g": Prior("normal", 0.0, 10.0), "log_tau": Prior("lognormal", -1.0, 2.0)})
    expected = stats.norm.logpdf([0.5, -2.0], 0, 10).sum() + stats.lognorm.logpdf(math.exp(-0.3), s=2.0,
                                                                                 scale=math.exp(-1.0))
    assert ps.log_prior() == pytest.approx(expected, rel=1e-13)
    grads = ps.log_prior_grad()
    rep = finite_diff_check(lambda p: p.log_prior(), ps, grads)
    assert rep.max_rel_error < FD_TOL
    assert ps.names() == ["g", "log_tau"]


def test_unknown_prior_family():
    with pytest.raises(ValueError):
        Prior("cauchy", 0.0, 1.0)


def test_amsgrad_zero_gradient_no_decay():
    ps = ParamStore({"w": [1.0, -2.0]})
    st_ = AmsGradState(weight_decay=0.0)
    for _ in range(3):
        amsgrad_step(ps, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(ps["w"], [1.0, -2.0])


def test_amsgrad_first_step_magnitude():
    ps = ParamStore({"w": 0.0})
    amsgrad_step(ps, {"w": np.array(1.0)}, AmsGradState())
    # first step: bias-corrected m = 1 and v_hat = 1, so the step is lr / (1 + eps)
    assert float(ps["w"]) == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-15)
    assert abs(float(ps["w"])) == pytest.approx(0.01, rel=1e-6)


def test_amsgrad_decoupled_weight_decay():
    ps = ParamStore({"w": 2.0})
    amsgrad_step(ps, {"w": np.array(0.0)}, AmsGradState(lr=0.1, weight_decay=0.5))
    assert float(ps["w"]) == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-15)


def test_amsgrad_vhat_monotone_and_deterministic():
    def run():
        rng = np.random.default_rng(5)
        ps = ParamStore({"a": rng.normal(size=4), "b": rng.normal(size=(2, 2))})
        state = AmsGradState()
        prev = None
        for _ in range(100):
            amsgrad_step(ps, {k: rng.normal(size=ps[k].shape) * rng.exponential() for k in ps}, state)
            cur = {k: state.v_hat[k].copy() for k in ps}
            if prev is not None:
                for k in ps:
                    assert np.all(cur[k] >= prev[k])
            prev = cur
        return ps

    assert run().equal(run())


def test_amsgrad_nan_gradient_names_parameter():
    ps = ParamStore({"w": [1.0]})
    with pytest.raises(NonFiniteError, match="'w'"):
        amsgrad_step(ps, {"w": np.array([np.nan])}, AmsGradState())


def test_amsgrad_touches_only_given_params():
    ps = ParamStore({"a": [1.0], "b": [1.0]})
    amsgrad_step(ps, {"a": np.array([1.0])}, AmsGradState())
    assert ps["b"][0] == 1.0 and ps["a"][0] != 1.0


def test_finite_diff_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    rep = _check(lambda p: p["x"] @ A @ p["x"], {"x": x}, {"x": 2 * A @ x})
    assert rep.max_rel_error < 1e-9


def test_finite_diff_flags_ties():
    x = np.array([[1.0], [1.0], [0.0]])
    _, idx = maxpool_positions(x)
    rep = finite_diff_check(lambda p: float(maxpool_positions(p["x"])[0][0]), ParamStore({"x": x}),
                            {"x": maxpool_backward(np.ones(1), idx, 3)},
                            kink_fn=lambda p: maxpool_positions(p["x"])[1].tolist())
    assert rep.n_ties == 2
    assert rep.n_checked == 1


def test_ensure_finite():
    with pytest.raises(NonFiniteError):
        ndiff.ensure_finite("x", np.array([1.0, np.inf]))


@settings(max_examples=30)
@given(st.lists(st.tuples(st.sampled_from(["a", "b.W", "log_tau_y", "gamma"]),
                          st.lists(st.integers(1, 3), max_size=3)), min_size=1, max_size=4, unique_by=lambda t: t[0]),
       st.integers(0, 2**16))
def test_checkpoint_round_trip(spec, seed):
    rng = np.random.default_rng(seed)
    ps = ParamStore({name: rng.normal(size=tuple(shape)) for name, shape in spec})
    data = checkpoint_bytes(ps, {"variant": "CAIRE", "l_max": 19})
    back, meta = parse_checkpoint(data)
    assert back.equal(ps) and meta == {"variant": "CAIRE", "l_max": 19}
    assert checkpoint_bytes(back, meta) == data


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        parse_checkpoint(b"NOTACKPT" + bytes(16))
    data = checkpoint_bytes(ParamStore({"a": [1.0]}))
    with pytest.raises(ValueError):
        parse_checkpoint(data + b"x")
