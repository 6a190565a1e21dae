import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_fd
from treediff.diffusion import make_schedule, reverse_step, spawn_rngs
from treediff.envs.tasks import GoldTask, gold_guidance
from treediff.guidance import (
    GuideFunction,
    StateMask,
    decompose_states,
    fd_gradient,
    gradient_guidance_shift,
    integrated_shift,
    linear_guide,
    median_bandwidth,
    particle_shift,
    rbf_potential,
    rbf_potential_grad,
    zero_guide,
)
from treediff.scores import GaussianMixtureModel

MASK = StateMask(control=(2, 3), observation=(0, 1))


def gold_task():
    return GoldTask(start=np.array([0.5, 0.5, 0, 0]), goal=np.array([4.5, 4.5]), gold=np.array([2.0, 3.0]))


# --------------------------------------------------------------------------- decomposition


def test_zero_guide_gives_all_control():
    probes = [np.random.default_rng(k).normal(size=(5, 4)) for k in range(3)]
    m = decompose_states(zero_guide(), probes)
    assert m.control == (0, 1, 2, 3) and m.observation == ()


def test_gold_guide_splits_positions_from_velocities():
    probes = [np.random.default_rng(k).normal(size=(6, 4)) * 3 for k in range(4)]
    m = decompose_states(gold_guidance(gold_task()), probes)
    assert m.observation == (0, 1) and m.control == (2, 3)


def test_single_channel_guide_found_by_fd():
    J = GuideFunction("ch3", lambda x: np.sum(np.sin(x[..., 3]), axis=-1))
    probes = [np.random.default_rng(k).normal(size=(5, 4)) for k in range(10)]
    assert decompose_states(J, probes).observation == (3,)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decomposition_ignores_probe_order(seed):
    rng = np.random.default_rng(seed)
    c = np.zeros((4, 5))
    c[:, rng.choice(5, size=2, replace=False)] = rng.normal(size=(4, 2))
    J = linear_guide(c)
    probes = [rng.normal(size=(4, 5)) for _ in range(6)]
    a = decompose_states(J, probes)
    b = decompose_states(J, [probes[k] for k in rng.permutation(6)])
    assert a == b == decompose_states(J, probes)


def test_decomposition_preconditions():
    with pytest.raises(ValueError):
        decompose_states(zero_guide(), [])
    with pytest.raises(ValueError):
        decompose_states(zero_guide(), [np.zeros((2, 2))], eps=0)
    with pytest.raises(ValueError):
        StateMask(control=(0, 1), observation=(1, 2))


# --------------------------------------------------------------------------- rbf potential


def test_single_particle_has_no_gradient():
    np.testing.assert_array_equal(rbf_potential_grad(np.ones((1, 6)), 1.0), np.zeros((1, 6)))


def test_two_particles_repel_symmetrically():
    p = np.array([0.3, -0.2, 0.5])
    g = rbf_potential_grad(np.stack([p, -p]), 0.7)
    np.testing.assert_allclose(g[0], -g[1], rtol=1e-15)
    assert g[0] @ (p - (-p)) > 0  # points away from the other particle


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.3, 3.0))
def test_rbf_gradient_matches_fd(seed, h):
    X = np.random.default_rng(seed).normal(size=(8, 5))
    g = rbf_potential_grad(X, h)
    for k in range(8):

        def phi_k(xk):
            Y = X.copy()
            Y[k] = xk
            return rbf_potential(Y, h)[k]

        np.testing.assert_allclose(g[k], central_fd(phi_k, X[k], h=1e-6), rtol=1e-6, atol=1e-8)


def test_rbf_bandwidth_must_be_positive():
    with pytest.raises(ValueError):
        rbf_potential_grad(np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        rbf_potential_grad(np.ones((2, 2)), -1.0)


def test_median_bandwidth():
    X = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert median_bandwidth(X) == pytest.approx(5 / np.sqrt(2))
    assert median_bandwidth(X[:1]) == 1.0


# --------------------------------------------------------------------------- shifts


def test_gradient_shift_zero_strength():
    mu = np.random.default_rng(0).normal(size=(3, 5, 4))
    np.testing.assert_array_equal(gradient_guidance_shift(mu, MASK, 0.0, gold_guidance(gold_task())), np.zeros_like(mu))


def test_linear_guide_shift_is_constant_on_observation():
    c = np.random.default_rng(1).normal(size=(5, 4))
    J = linear_guide(c)
    for seed in range(3):
        mu = np.random.default_rng(seed).normal(size=(2, 5, 4))
        out = gradient_guidance_shift(mu, MASK, 0.5, J)
        np.testing.assert_allclose(out[..., :2], np.broadcast_to(0.5 * c[:, :2], (2, 5, 2)))
        np.testing.assert_array_equal(out[..., 2:], 0.0)


def test_gold_shift_matches_hand_gradient():
    task = gold_task()
    mu = np.random.default_rng(2).normal(size=(1, 6, 4)) * 2
    out = gradient_guidance_shift(mu, MASK, 0.7, gold_guidance(task))
    d = mu[0, :, :2] - task.gold
    hand = -0.7 * d / np.linalg.norm(d, axis=1, keepdims=True)
    np.testing.assert_allclose(out[0, :, :2], hand, rtol=1e-12)
    np.testing.assert_array_equal(out[0, :, 2:], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 5), st.floats(0, 5))
def test_integrated_shift_is_sum_of_parts(seed, ap, ag):
    mu = np.random.default_rng(seed).normal(size=(4, 6, 4))
    J = gold_guidance(gold_task())
    p = particle_shift(mu, MASK, ap)
    g = gradient_guidance_shift(mu, MASK, ag, J)
    np.testing.assert_array_equal(integrated_shift(mu, MASK, ap, ag, J), p + g)
    # channel separation
    np.testing.assert_array_equal(p[..., :2], 0.0)
    np.testing.assert_array_equal(g[..., 2:], 0.0)


def test_integrated_shift_reductions():
    mu = np.random.default_rng(3).normal(size=(4, 6, 4))
    J = gold_guidance(gold_task())
    np.testing.assert_array_equal(integrated_shift(mu, MASK, 0.0, 1.3, J), gradient_guidance_shift(mu, MASK, 1.3, J))
    np.testing.assert_array_equal(integrated_shift(mu[:1], MASK, 2.0, 0.0, J), np.zeros_like(mu[:1]))


def test_repulsion_widens_pairs():
    # the final step draws no noise, so the comparison isolates the shift
    s = make_schedule(10)
    m = GaussianMixtureModel.gaussian(np.zeros(6), np.eye(6))
    mask = StateMask(control=(0, 1), observation=())
    J = zero_guide()
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=(2, 3, 2))
        plain = reverse_step(m, x, 1, s, spawn_rngs(seed, 2), shift=lambda mu, i: integrated_shift(mu, mask, 0.0, 0.0, J))
        pushed = reverse_step(m, x, 1, s, spawn_rngs(seed, 2), shift=lambda mu, i: integrated_shift(mu, mask, 1.0, 0.0, J))
        assert np.linalg.norm(pushed[0] - pushed[1]) > np.linalg.norm(plain[0] - plain[1])


def test_fd_gradient_fallback():
    J = GuideFunction("cubic", lambda x: np.sum(x**3, axis=(-2, -1)))
    x = np.random.default_rng(4).normal(size=(2, 3, 2))
    np.testing.assert_allclose(J.gradient(x), 3 * x**2, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(fd_gradient(J.value_fn, x[0].copy()), 3 * x[0] ** 2, rtol=1e-8, atol=1e-9)


def test_affine_pullback_chain_rule():
    J = gold_guidance(gold_task())
    scale, offset = np.array([2.0, 3.0, 5.0, 5.0]), np.array([1.0, -1.0, 0.0, 0.0])
    P = J.affine_pullback(scale, offset)
    x = np.random.default_rng(5).normal(size=(6, 4))
    assert P.value(x) == pytest.approx(J.value(x * scale + offset))
    np.testing.assert_allclose(P.gradient(x), central_fd(lambda z: P.value(z.reshape(6, 4)), x.ravel()).reshape(6, 4), rtol=1e-6, atol=1e-8)
