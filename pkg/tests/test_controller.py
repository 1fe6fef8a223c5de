import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from posadapt import dp, estimator
from posadapt.controller import AdaptiveController
from posadapt.exceptions import DimensionError, InsufficientExcitation
from posadapt.harness import ControllerConfig, Disturbance, ExperimentConfig, regret_experiment
from posadapt.problem import random_feasible_input, random_problem


def feasible(P, x, u, slack=1e-12):
    if np.any(u < -slack):
        return False
    budget = P.E @ x
    return all(u[sl].sum() <= budget[i] + slack for i, sl in enumerate(P.block_slices()))


def test_zero_epsilon_is_deterministic(example_problem):
    c = AdaptiveController(example_problem, eps0=0.0, random_state=0).reset()
    x = np.array([0.3, 0.2, 0.1])
    for _ in range(20):
        u, g = c.act(x)
        np.testing.assert_array_equal(u, c.gain_.K @ x)
        assert g is c.gain_


def test_zero_state_gives_zero_input(example_problem):
    c = AdaptiveController(example_problem, eps0=1.0, random_state=0).reset()
    for _ in range(20):
        u, _ = c.act(np.zeros(3))
        assert np.all(u == 0)


def test_exploration_frequency(example_problem):
    c = AdaptiveController(example_problem, eps0=0.05, random_state=3).reset()
    hits = 0
    for _ in range(10_000):
        c.act(np.ones(3))
        hits += c.last_explored_
    assert abs(hits / 10_000 - 0.05) <= 0.01


def test_epsilon_schedule(example_problem):
    c = AdaptiveController(example_problem, random_state=0).reset()
    Sigma = c.state_.Sigma.copy()
    assert c.epsilon == 0.05
    c.end_episode()
    assert c.epsilon == pytest.approx(0.0495, rel=1e-15)
    np.testing.assert_array_equal(c.state_.Sigma, Sigma)
    for _ in range(999):
        c.end_episode()
    assert c.epsilon == pytest.approx(0.05 * 0.99 ** 1000)
    assert 2.1e-6 < c.epsilon < 2.2e-6


def test_negative_state_rejected(example_problem):
    c = AdaptiveController(example_problem).reset()
    with pytest.raises(ValueError):
        c.act(np.array([0.1, -0.01, 0.0]))
    with pytest.raises(DimensionError):
        c.act(np.ones(2))
    u, _ = c.act(np.array([0.1, -1e-14, 0.0]))  # rounding-level negatives are clipped
    assert np.all(u >= 0)


def test_converges_to_optimal_gain_on_exact_data(example_problem):
    P = example_problem
    _, K_opt = dp.brute_force_p(P)
    # tiny Sigma(0) so the regularisation bias is far below the tolerance
    c = AdaptiveController(P, eps0=0.0, sigma0_scale=1e-10, random_state=0).reset()
    rng = np.random.default_rng(0)
    gains = []
    for _ in range(60):
        x = rng.uniform(0.1, 1.0, 3)
        u = random_feasible_input(P, x, rng)
        c.observe(x, u, P.A @ x + P.B @ u)
        gains.append(c.gain_.selector)
    first = next(i for i, g in enumerate(gains) if g == K_opt.selector)
    assert all(g == K_opt.selector for g in gains[first:])
    np.testing.assert_allclose(c.p_t, dp.solve_p(P).p, atol=1e-6)


def test_solver_failure_keeps_gain(example_problem, monkeypatch):
    c = AdaptiveController(example_problem, random_state=0).reset()
    before = c.gain_

    def boom(*a, **k):
        raise InsufficientExcitation("injected")
    monkeypatch.setattr("posadapt.controller.solve_data_driven", boom)
    c.observe(np.ones(3), np.zeros(4), np.ones(3))
    assert c.gain_ is before
    assert c.n_failures_ == 1


def test_online_statistics_equal_batch(example_problem):
    P = example_problem
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (30, 3))
    U = np.array([random_feasible_input(P, x, rng) for x in X])
    Xn = X @ P.A.T + U @ P.B.T
    c = AdaptiveController(P, recompute_period=7).partial_fit(X, U, Xn)
    batch = estimator.from_batch(X, U, Xn)
    np.testing.assert_allclose(c.state_.Sigma, batch.Sigma, atol=1e-12)
    f = AdaptiveController(P).fit(X, U, Xn)
    np.testing.assert_allclose(f.state_.SigmaBar, batch.SigmaBar, atol=1e-12)
    assert f.predict(X).shape == (30, 4)


def test_estimator_api(example_problem):
    c = AdaptiveController(example_problem, eps0=0.1, recompute_period=3)
    params = c.get_params()
    assert params["eps0"] == 0.1 and params["recompute_period"] == 3
    d = clone(c)
    assert not hasattr(d, "state_") and d.eps0 == 0.1
    with pytest.raises(ValueError):
        AdaptiveController(example_problem, eps0=2.0).reset()
    with pytest.raises(TypeError):
        AdaptiveController(None).reset()


def test_same_seed_same_actions(example_problem):
    def actions(seed):
        c = AdaptiveController(example_problem, eps0=0.5, random_state=seed).reset()
        return [c.act(np.array([1.0, 0.5, 0.2]))[1].selector for _ in range(50)]
    assert actions(5) == actions(5)
    assert actions(5) != actions(6)


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_every_input_is_feasible(seed, eps0, mix):
    rng = np.random.default_rng(seed)
    P = random_problem(rng, zero_blocks=True)
    c = AdaptiveController(P, eps0=eps0, explore_mix=mix, random_state=seed).reset()
    x = rng.uniform(0, 1, P.n)
    for _ in range(30):
        u, g = c.act(x)
        assert feasible(P, x, u)
        x_next = P.A @ x + P.B @ u + rng.uniform(0, 0.01, P.n)
        c.observe(x, u, x_next)
        x = np.maximum(x_next, 0.0) if np.max(x_next) < 5 else rng.uniform(0, 1, P.n)


def test_noise_free_misspecification_decreases_to_zero():
    cfg = ExperimentConfig(runs=1, episodes=60, algorithms=("adaptive",),
                           disturbance=Disturbance("none"),
                           controller=ControllerConfig(eps0=0.5, alpha=1.0, sigma0_scale=1e-10))
    lhs = regret_experiment(cfg).lhs_matrix()[0]
    assert np.all(np.diff(lhs) <= 1e-8)
    assert lhs[-1] < 1e-8
