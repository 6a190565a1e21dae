import numpy as np
import pytest

from treediff import baselines
from treediff.diffusion import Budget, ConditionSet, make_schedule, sample, spawn_rngs
from treediff.guidance import GuideFunction
from treediff.scores import GaussianMixtureModel

SHAPE = (3, 2)
SCHED = make_schedule(20)
MODEL = GaussianMixtureModel.gaussian(np.zeros(6), np.eye(6))
COND = ConditionSet(((0, 0, 0.5),))
TARGET = np.full(SHAPE, 1.5)


def quadratic():
    return GuideFunction("quad", lambda x: -np.sum((np.asarray(x) - TARGET) ** 2, axis=(-2, -1)), lambda x: -2 * (np.asarray(x) - TARGET))


def two_peaks():
    """Bimodal data with a tall narrow bonus on the positive mode."""
    model = GaussianMixtureModel(
        np.array([0.5, 0.5]),
        np.stack([np.full(6, -1.0), np.full(6, 1.0)]),
        np.stack([0.2 * np.eye(6)] * 2),
    )

    def value(x):
        x = np.asarray(x)
        d_lo = np.sum((x + 1) ** 2, axis=(-2, -1))
        d_hi = np.sum((x - 1) ** 2, axis=(-2, -1))
        return np.exp(-d_lo / 4) + 3 * np.exp(-d_hi / 0.5)

    return model, GuideFunction("peaks", value)


def test_mcss_with_one_sample_is_guided_diffuser():
    J = quadratic()
    for seed in range(5):
        best, k, _, _ = baselines.mcss(MODEL, J, J, COND, 0.3, SCHED, SHAPE, spawn_rngs(seed, 1))
        gg = baselines.diffuser_gg(MODEL, J, COND, 0.3, SCHED, SHAPE, spawn_rngs(seed, 1))
        assert k == 0
        np.testing.assert_array_equal(best, gg[0])


def test_zero_strength_is_plain_sampling():
    gg = baselines.diffuser_gg(MODEL, quadratic(), COND, 0.0, SCHED, SHAPE, spawn_rngs(4, 6))
    np.testing.assert_array_equal(gg, sample(MODEL, SHAPE, SCHED, spawn_rngs(4, 6), COND))


def test_guidance_moves_samples_toward_the_optimum():
    J = quadratic()
    gain = []
    for seed in range(50):
        guided = baselines.diffuser_gg(MODEL, J, COND, 0.5, SCHED, SHAPE, spawn_rngs(seed, 1))
        plain = baselines.diffuser_gg(MODEL, J, COND, 0.0, SCHED, SHAPE, spawn_rngs(seed, 1))
        gain.append(J.value(guided)[0] - J.value(plain)[0])
    assert np.mean(gain) > 0


def test_selection_returns_max_score():
    J = quadratic()
    for seed in range(5):
        best, k, trajs, scores = baselines.mcss(MODEL, J, J, COND, 0.1, SCHED, SHAPE, spawn_rngs(seed, 8))
        assert scores[k] == scores.max() == J.value(best)
        np.testing.assert_array_equal(scores, J.value(trajs))


def test_select_best_breaks_ties_low():
    J = GuideFunction("flat", lambda x: np.zeros(np.asarray(x).shape[:-2]))
    k, _ = baselines.select_best(np.zeros((4, 3, 2)), J)
    assert k == 0


def test_mcss_ss_single_proposal_is_mcss():
    J = quadratic()
    for seed in range(3):
        a = baselines.mcss_ss(MODEL, J, J, COND, 0.3, SCHED, SHAPE, spawn_rngs(seed, 4), spawn_rngs(seed, 4, key=3), M=1)
        b = baselines.mcss(MODEL, J, J, COND, 0.3, SCHED, SHAPE, spawn_rngs(seed, 4))
        assert a[1] == b[1]
        np.testing.assert_array_equal(a[2], b[2])


@pytest.mark.parametrize("n,M", [(4, 4), (3, 2)])
def test_mcss_ss_candidate_budget(n, M):
    b = Budget()
    baselines.mcss_ss(MODEL, quadratic(), quadratic(), COND, 0.3, SCHED, SHAPE, spawn_rngs(0, n), spawn_rngs(0, n, key=3), M=M, budget=b)
    assert b.candidate_draws == M * n * SCHED.N
    assert b.reverse_steps == n * SCHED.N


def test_mcss_ss_keeps_conditions():
    out = baselines.mcss_ss(MODEL, quadratic(), quadratic(), COND, 0.3, SCHED, SHAPE, spawn_rngs(1, 4), spawn_rngs(1, 4, key=3))[2]
    assert np.all(out[:, 0, 0] == 0.5)


def test_mcss_ss_resampling_helps_on_two_peaks():
    model, J = two_peaks()
    one, four = [], []
    for seed in range(100):
        args = (model, J, J, None, 0.0, SCHED, SHAPE, spawn_rngs(seed, 2), spawn_rngs(seed, 2, key=3))
        one.append(baselines.mcss_ss(*args, M=1)[3].max())
        four.append(baselines.mcss_ss(*args, M=4)[3].max())
    assert np.mean(four) >= np.mean(one)


def test_mcss_ss_rejects_bad_arguments():
    J = quadratic()
    args = (MODEL, J, J, COND, 0.3, SCHED, SHAPE, spawn_rngs(0, 2), spawn_rngs(0, 2, key=3))
    with pytest.raises(ValueError):
        baselines.mcss_ss(*args, M=0)
    with pytest.raises(ValueError):
        baselines.mcss_ss(*args, temperature=0.0)
    with pytest.raises(ValueError):
        baselines.mcss(MODEL, J, J, COND, 0.3, SCHED, SHAPE, [])
