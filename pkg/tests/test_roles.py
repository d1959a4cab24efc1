import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from role_forge.autodiff import Tape, finite_diff_check
from role_forge.roles import (
    VAR_FLOOR,
    RoleDistribution,
    dissimilarity,
    dissimilarity_raw,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    init_role_params,
    role_decode,
    role_encode,
    role_sample,
    trajectory_posterior,
)

OBS, HID, ACTS = 5, 64, 3


def role_params(seed=0, scale=None):
    rng = np.random.default_rng(seed)
    p = init_role_params(rng, OBS, HID, ACTS)
    if scale is not None:
        p = {k: rng.standard_normal(v.shape) * scale for k, v in p.items()}
    return p


def zeros_like(p):
    return {k: np.zeros_like(v) for k, v in p.items()}


def dist(mu, s2):
    return RoleDistribution.from_arrays(mu, s2)


def value(fn, *args):
    return fn(Tape(record=False), *args).data


# --- encoder ----------------------------------------------------------------------------


def test_zero_encoder_hits_variance_floor():
    tape = Tape()
    d = role_encode(tape, tape.params(zeros_like(role_params())), tape.const(np.ones((4, OBS))))
    np.testing.assert_array_equal(d.mu.data, 0.0)
    np.testing.assert_array_equal(d.sigma2.data, VAR_FLOOR)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 5.0))
def test_encoder_variance_never_below_floor(seed, scale):
    tape = Tape(record=False)
    obs = np.random.default_rng(seed).standard_normal((8, OBS)) * 3
    d = role_encode(tape, tape.params(role_params(seed, scale)), tape.const(obs))
    assert d.sigma2.data.min() >= VAR_FLOOR
    assert np.all(np.isfinite(d.mu.data))


def test_encoder_gradcheck():
    p = role_params(1, scale=1.0)
    obs = np.random.default_rng(2).standard_normal((6, OBS))

    def f(t, q):
        d = role_encode(t, q, t.const(obs))
        return t.add(t.sum(d.mu), t.sum(d.sigma2))

    assert finite_diff_check(f, p, names=[k for k in p if k.startswith("role_encoder")]) < 1e-5


def test_encoder_rejects_nonfinite_output():
    p = role_params()
    p["role_encoder/fc2/b"][:] = np.nan
    tape = Tape()
    with pytest.raises(FloatingPointError, match="parameter norms"):
        role_encode(tape, tape.params(p), tape.const(np.ones((1, OBS))))


# --- sampling ---------------------------------------------------------------------------


def test_sample_zero_noise_is_mean():
    d = dist([[0.3, -1.0, 2.0]], [[0.5, 0.1, 4.0]])
    s = role_sample(Tape(), d, np.zeros(3))
    np.testing.assert_array_equal(s.rho.data, d.mu.data)


def test_sample_unit_variance():
    d = dist([[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]])
    s = role_sample(Tape(), d, [1.0, -1.0, 2.0])
    np.testing.assert_array_equal(s.rho.data, [[1.0, -1.0, 2.0]])
    np.testing.assert_array_equal(s.noise, [[1.0, -1.0, 2.0]])


def test_sample_moments():
    n = 10**6
    mu = np.array([0.5, 0.0, 0.0])
    s2 = np.array([0.1, 0.2, 0.4])
    noise = np.random.default_rng(0).standard_normal((n, 3))
    d = dist(np.tile(mu, (n, 1)), np.tile(s2, (n, 1)))
    rho = role_sample(Tape(record=False), d, noise).rho.data
    assert np.all(np.abs(rho.mean(axis=0) - mu) < 4 * np.sqrt(s2) / np.sqrt(n))
    assert np.all(np.abs(rho.var(axis=0) / s2 - 1) < 0.05)


def test_sample_gradient_reaches_mean_and_variance():
    tape = Tape()
    mu = tape.leaf([[0.2, 0.1, -0.3]], requires_grad=True)
    s2 = tape.leaf([[0.4, 0.9, 0.25]], requires_grad=True)
    s = role_sample(tape, RoleDistribution(mu, s2), [1.0, 2.0, -1.0])
    tape.backward(tape.sum(s.rho))
    np.testing.assert_array_equal(mu.grad, 1.0)
    np.testing.assert_allclose(s2.grad, [[0.5 / np.sqrt(0.4), 1.0 / np.sqrt(0.9), -0.5 / np.sqrt(0.25)]], atol=1e-15)


# --- log density, KL, entropy -----------------------------------------------------------

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def test_log_prob_standard_normal_at_zero():
    lp = value(gaussian_log_prob, dist(np.zeros(3), np.ones(3)), Tape().const(np.zeros((1, 3))))
    assert lp[0] == pytest.approx(-2.756815599614018, abs=1e-12)
    assert -HALF_LOG_2PI == pytest.approx(-0.9189385332046727, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    mu=st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    s2=st.lists(st.floats(0.1, 5), min_size=3, max_size=3),
    x=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)
def test_log_prob_quadratic_identity(mu, s2, x):
    d = dist(mu, s2)
    t = Tape(record=False)
    at_x = gaussian_log_prob(t, d, t.const([x])).item()
    at_mu = gaussian_log_prob(t, d, t.const([mu])).item()
    expected = -np.sum((np.array(x) - mu) ** 2 / (2 * np.array(s2)))
    assert at_x - at_mu == pytest.approx(expected, abs=1e-10)
    assert at_mu == pytest.approx(-0.5 * np.sum(np.log(2 * np.pi * np.array(s2))), abs=1e-12)
    assert at_x <= at_mu + 1e-12


@pytest.mark.parametrize("mu, s2", [(0.0, 1.0), (1.3, 0.1), (-2.0, 3.7)])
def test_log_prob_integrates_to_one(mu, s2):
    d = dist([[mu]], [[s2]])
    t = Tape(record=False)
    sd = math.sqrt(s2)
    area, _ = integrate.quad(
        lambda x: math.exp(gaussian_log_prob(t, d, t.const([[x]])).item()), mu - 10 * sd, mu + 10 * sd, epsabs=1e-12
    )
    assert abs(area - 1.0) < 1e-6


def test_kl_equal_is_zero():
    d = dist([[0.3, -0.2, 1.0]], [[0.2, 1.5, 0.1]])
    assert abs(value(gaussian_kl, d, d)[0]) < 1e-12


def test_kl_shifted_mean():
    kl = value(gaussian_kl, dist(np.ones(3), np.ones(3)), dist(np.zeros(3), np.ones(3)))[0]
    assert kl == pytest.approx(3 * 0.5, abs=1e-10)


def test_kl_narrow_vs_wide():
    per_dim = 0.5 * math.log(10) + 0.05 - 0.5
    assert per_dim == pytest.approx(0.701292546497023, abs=1e-12)
    kl = value(gaussian_kl, dist(np.zeros(3), np.full(3, 0.1)), dist(np.zeros(3), np.ones(3)))[0]
    assert kl == pytest.approx(3 * per_dim, abs=1e-10)


def mc_kl(p_mu, p_s2, q_mu, q_s2, n, rng):
    x = p_mu + np.sqrt(p_s2) * rng.standard_normal((n, p_mu.size))
    logp = -0.5 * np.sum(np.log(2 * np.pi * p_s2) + (x - p_mu) ** 2 / p_s2, axis=1)
    logq = -0.5 * np.sum(np.log(2 * np.pi * q_s2) + (x - q_mu) ** 2 / q_s2, axis=1)
    diff = logp - logq
    return diff.mean(), diff.std(ddof=1) / np.sqrt(n)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(11)
    for _ in range(20):
        p_mu, q_mu = rng.normal(0, 1, 3), rng.normal(0, 1, 3)
        p_s2, q_s2 = rng.uniform(0.1, 2.0, 3), rng.uniform(0.1, 2.0, 3)
        closed = value(gaussian_kl, dist(p_mu, p_s2), dist(q_mu, q_s2))[0]
        est, se = mc_kl(p_mu, p_s2, q_mu, q_s2, 10**6, rng)
        assert abs(closed - est) < 3 * se


@settings(max_examples=100, deadline=None)
@given(
    a=st.lists(st.floats(-4, 4), min_size=6, max_size=6),
    b=st.lists(st.floats(0.1, 6), min_size=6, max_size=6),
)
def test_kl_non_negative(a, b):
    p = dist(a[:3], b[:3])
    q = dist(a[3:], b[3:])
    assert value(gaussian_kl, p, q)[0] >= -1e-12


def test_entropy_at_floor():
    h = value(gaussian_entropy, dist(np.zeros(3), np.full(3, VAR_FLOOR)))[0]
    per_dim = 0.5 * (math.log(2 * math.pi) + 1 + math.log(0.1))
    assert per_dim == pytest.approx(0.2676459867, abs=1e-9)
    assert h == pytest.approx(3 * per_dim, abs=1e-12)
    assert h > 0


def test_entropy_doubling_variance():
    a = value(gaussian_entropy, dist(np.zeros(3), [0.3, 0.5, 1.0]))[0]
    b = value(gaussian_entropy, dist(np.zeros(3), [0.6, 0.5, 1.0]))[0]
    assert b - a == pytest.approx(0.5 * math.log(2), abs=1e-12)


# --- posterior, dissimilarity, decoder --------------------------------------------------


def test_zero_posterior_hits_floor():
    tape = Tape()
    d = trajectory_posterior(
        tape, tape.params(zeros_like(role_params())), tape.const(np.ones((3, HID))), tape.const(np.ones((3, OBS)))
    )
    np.testing.assert_array_equal(d.mu.data, 0.0)
    np.testing.assert_array_equal(d.sigma2.data, VAR_FLOOR)


def test_posterior_kl_gradcheck():
    p = role_params(3, scale=0.8)
    rng = np.random.default_rng(4)
    obs, h = rng.standard_normal((5, OBS)), rng.standard_normal((5, HID))

    def f(t, q):
        return t.sum(gaussian_kl(t, role_encode(t, q, t.const(obs)), trajectory_posterior(t, q, t.const(h), t.const(obs))))

    names = [k for k in p if k.startswith(("role_encoder", "traj_encoder"))]
    assert finite_diff_check(f, p, names=names) < 1e-4


def test_dissimilarity_properties():
    p = role_params(5, scale=0.5)
    rng = np.random.default_rng(6)
    hi, hj = rng.standard_normal((10, HID)), rng.standard_normal((10, HID))
    t = Tape(record=False)
    q = t.params(p)
    dij = dissimilarity(t, q, t.const(hi), t.const(hj)).data
    dji = dissimilarity(t, q, t.const(hj), t.const(hi)).data
    np.testing.assert_array_equal(dij, dji)
    same = dissimilarity(t, q, t.const(hi), t.const(hi)).data
    np.testing.assert_array_equal(same, dissimilarity_raw(t, q, t.const(hi), t.const(hi)).data)
    zero = dissimilarity(t, t.params(zeros_like(p)), t.const(hi), t.const(hj)).data
    np.testing.assert_array_equal(zero, 0.0)


def test_decoder_census_and_zero_output():
    tape = Tape()
    w, b = role_decode(tape, tape.params(zeros_like(role_params())), tape.const(np.ones((2, 3))), HID, ACTS)
    assert w.shape == (2, HID, ACTS) and b.shape == (2, ACTS)
    assert w.data[0].size + b.data[0].size == 195
    assert not w.data.any() and not b.data.any()


def test_reparameterized_path_gradcheck():
    p = role_params(7, scale=0.7)
    rng = np.random.default_rng(8)
    obs = rng.standard_normal((4, OBS))
    noise = rng.standard_normal((4, 3))
    wsum = rng.standard_normal((4, HID, ACTS))

    def f(t, q):
        rho = role_sample(t, role_encode(t, q, t.const(obs)), noise).rho
        w, b = role_decode(t, q, rho, HID, ACTS)
        return t.add(t.sum(t.mul(w, t.const(wsum))), t.sum(b))

    names = [k for k in p if k.startswith("role_encoder")]
    assert finite_diff_check(f, p, names=names) < 1e-4
