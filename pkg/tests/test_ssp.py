import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posadapt import dp
from posadapt.exceptions import ConversionError, DimensionError, ImproperInstance
from posadapt.problem import validate
from posadapt.ssp import (QTable, SspInstance, convert, exact_ssp_value, q_learning_update,
                          random_ssp, run_qlearning_episode, ssp_step)

from conftest import P_STAR, PRINTED_A, PRINTED_B


def policy_enumeration_values(ssp):
    """Oracle: best proper deterministic policy by direct linear solves."""
    n = ssp.n_states
    best = np.full(n, np.inf)
    for pol in itertools.product(*(range(a) for a in ssp.n_actions)):
        P = np.column_stack([ssp.T[i][:n, a] for i, a in enumerate(pol)]).T
        c = np.array([ssp.c[i][a] for i, a in enumerate(pol)])
        if max(abs(np.linalg.eigvals(P))) >= 1 - 1e-12:
            continue
        best = np.minimum(best, np.linalg.solve(np.eye(n) - P, c))
    return best


def test_conversion_reproduces_printed_problem(ssp3):
    P = convert(ssp3)
    assert np.array_equal(P.A, PRINTED_A)
    assert np.array_equal(P.B, PRINTED_B)
    assert np.array_equal(P.s, [1.5, 1.5, 1.5])
    assert np.array_equal(P.r, [0.5, 0.5, 0.5, 0.5])
    assert np.array_equal(P.E, np.eye(3))
    assert P.partition == (1, 2, 1)
    assert validate(P).ok


def test_example_values_agree_across_domains(ssp3):
    V, policy = exact_ssp_value(ssp3)
    assert V[-1] == 0.0
    np.testing.assert_allclose(V[:3], P_STAR, atol=1e-9)
    np.testing.assert_allclose(V[:3], policy_enumeration_values(ssp3), atol=1e-9)
    p = dp.solve_p(convert(ssp3)).p
    assert abs(V[ssp3.i_init] - p[0]) <= 1e-6
    # the optimal gain (0, 2, 0) means state 2 takes its third action
    assert policy == [0, 2, 0]


@given(st.integers(0, 10**6))
def test_random_ssp_round_trip(seed):
    ssp = random_ssp(seed)
    V, _ = exact_ssp_value(ssp)
    np.testing.assert_allclose(V[:-1], policy_enumeration_values(ssp), atol=1e-8)
    P = convert(ssp)
    assert validate(P).assumption1
    np.testing.assert_allclose(dp.solve_p(P).p, V[:-1], atol=1e-6)


def test_single_action_conversion():
    ssp = SspInstance(T=[[[0.5], [0.5]]], c=[[2.0]])
    P = convert(ssp)
    assert P.m == 0 and P.partition == (0,)
    assert P.A[0, 0] == 0.5 and P.s[0] == 2.0


def test_identical_actions_give_zero_b():
    col = [[0.2, 0.2], [0.3, 0.3], [0.5, 0.5]]
    ssp = SspInstance(T=[col, col], c=[[1.0, 1.25], [2.0, 2.5]])
    P = convert(ssp)
    assert np.array_equal(P.B, np.zeros((2, 2)))
    assert np.array_equal(P.r, [0.25, 0.5])


def test_negative_cost_rejected():
    with pytest.raises(ConversionError):
        convert(SspInstance(T=[[[0.0], [1.0]]], c=[[-1.0]]))


def test_instance_validation():
    with pytest.raises(DimensionError):
        SspInstance(T=[[[0.5], [0.4]]], c=[[1.0]])
    with pytest.raises(DimensionError):
        SspInstance(T=[[[0.5], [0.5]]], c=[[1.0, 2.0]])
    with pytest.raises(DimensionError):
        SspInstance(T=[[[0.5], [0.5]]], c=[[1.0]], i_init=1)


def test_json_round_trip(ssp3):
    d = ssp3.to_dict()
    assert d["i_init"] == 1
    again = SspInstance.from_dict(json.loads(json.dumps(d)))
    assert all(np.array_equal(a, b) for a, b in zip(again.T, ssp3.T))
    assert again.i_init == ssp3.i_init == 0


def test_goal_is_absorbing(ssp3):
    rng = np.random.default_rng(0)
    assert ssp_step(ssp3, ssp3.goal, 0, rng) == (ssp3.goal, 0.0)


def test_step_distribution(ssp3):
    rng = np.random.default_rng(0)
    N = 100_000
    counts = np.bincount([ssp_step(ssp3, 0, 0, rng)[0] for _ in range(N)], minlength=4)
    np.testing.assert_allclose(counts / N, [0.4, 0.0, 0.4, 0.2], atol=0.01)
    assert ssp_step(ssp3, 0, 0, rng)[1] == 1.5


def test_deterministic_column():
    ssp = SspInstance(T=[[[0.0], [1.0], [0.0]], [[0.0], [0.0], [1.0]]], c=[[1.0], [1.0]])
    rng = np.random.default_rng(0)
    assert all(ssp_step(ssp, 0, 0, rng)[0] == 1 for _ in range(100))


def test_chain_values():
    ssp = SspInstance(T=[[[0.0], [1.0], [0.0]], [[0.0], [0.0], [1.0]]], c=[[1.0], [1.0]])
    V, _ = exact_ssp_value(ssp)
    np.testing.assert_allclose(V, [2.0, 1.0, 0.0])


def test_improper_instance():
    ssp = SspInstance(T=[[[1.0], [0.0]]], c=[[1.0]])
    with pytest.raises(ImproperInstance):
        exact_ssp_value(ssp)


def test_q_update_into_goal():
    table = QTable([2, 1])
    q_learning_update(table, 0, 1, 1.5, table.goal, stepsize0=1.0)
    assert table.q[0][1] == 1.5 and table.visits[0][1] == 1


def test_q_update_averages_to_fixed_point():
    table = QTable([1, 1])
    table.q[1][0] = 3.0
    for _ in range(5000):
        table.update(0, 0, 2.0, 1, stepsize0=1.0, omega=1.0)
    assert table.q[0][0] == pytest.approx(5.0)


@given(st.integers(0, 10**6))
def test_goal_row_stays_zero(seed):
    rng = np.random.default_rng(seed)
    ssp = random_ssp(rng)
    table = QTable.for_instance(ssp)
    for _ in range(20):
        run_qlearning_episode(ssp, table, 0.3, rng, t_max=200)
        table.update(table.goal, 0, 5.0, 0)
    assert np.all(table.q[table.goal] == 0)


def test_q_learning_finds_optimal_policy(ssp3):
    rng = np.random.default_rng(0)
    table = QTable.for_instance(ssp3)
    for h in range(10_000):
        run_qlearning_episode(ssp3, table, 0.05 * 0.99 ** h, rng)
    assert table.greedy_policy() == exact_ssp_value(ssp3)[1]
