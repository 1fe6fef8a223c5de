import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from posadapt.exceptions import DimensionError, EnumerationTooLarge
from posadapt.problem import (PositiveProblem, dump_problem, enumerate_gains,
                              extended_constraint, gain_count, gain_from_selector,
                              is_feasible_gain, load_problem, random_feasible_input,
                              random_gain, random_problem, validate)


def tiny(**kw):
    d = dict(A=[[0.5]], B=[[0.1, 0.2]], E=[[1.0]], s=[1.0], r=[0.1, 0.2], partition=[2])
    d.update(kw)
    return PositiveProblem(**d)


def test_arrays_are_read_only_copies():
    A = np.array([[0.5]])
    P = tiny(A=A)
    A[0, 0] = 9.0
    assert P.A[0, 0] == 0.5
    with pytest.raises(ValueError):
        P.A[0, 0] = 1.0


@pytest.mark.parametrize("kw", [
    {"A": [[0.5, 0.1]]},
    {"partition": [1]},
    {"partition": [2, 0]},
    {"B": [[0.1, 0.2, 0.3]]},
    {"s": [1.0, 2.0]},
    {"r": [0.1]},
    {"E": [[1.0, 0.0]]},
    {"A": [[np.nan]]},
])
def test_dimension_errors(kw):
    with pytest.raises(DimensionError):
        tiny(**kw)


def test_empty_blocks_are_allowed():
    P = PositiveProblem(A=np.eye(2) * 0.5, B=np.zeros((2, 1)), E=np.eye(2), s=[1, 1],
                        r=[0.0], partition=[0, 1])
    assert P.m == 1
    np.testing.assert_array_equal(P.block_min(np.array([-2.0])), [0.0, -2.0])
    assert P.block_selector(np.array([-2.0])) == (0, 1)


def test_block_min_and_selector_tie_break(example_problem):
    v = np.array([0.3, -1.0, -1.0, 0.2])
    np.testing.assert_array_equal(example_problem.block_min(v), [0.0, -1.0, 0.0])
    assert example_problem.block_selector(v) == (0, 1, 0)


def test_gain_set_of_example_instance(example_problem):
    gains = enumerate_gains(example_problem)
    assert len(gains) == gain_count(example_problem) == 12
    assert gains[0].selector == (0, 0, 0)
    assert len({g.selector for g in gains}) == 12
    for g in gains:
        assert is_feasible_gain(example_problem, g.K)
        assert np.all(g.K >= 0)


def test_gain_rows_carry_constraint():
    P = random_problem(3, n=3)
    g = gain_from_selector(P, [1] * 3)
    Ebar = extended_constraint(P)
    for i, a in enumerate(P.starts):
        np.testing.assert_array_equal(g.K[a], P.E[i])
        np.testing.assert_array_equal(Ebar[a], P.E[i])
    with pytest.raises(DimensionError):
        gain_from_selector(P, [P.partition[0] + 1, 0, 0])


def test_infeasible_gain_rejected(example_problem):
    K = gain_from_selector(example_problem, (1, 1, 1)).K.copy()
    K[1, 1] = 0.5
    assert not is_feasible_gain(example_problem, K)


def test_enumeration_cap():
    P = random_problem(0, n=5, max_block=3)
    with pytest.raises(EnumerationTooLarge):
        enumerate_gains(P, cap=gain_count(P) - 1)


def test_random_gain_is_uniform_over_selectors(example_problem):
    rng = np.random.default_rng(1)
    counts = {}
    N = 24000
    for _ in range(N):
        sel = random_gain(example_problem, rng).selector
        counts[sel] = counts.get(sel, 0) + 1
    assert len(counts) == 12
    freq = np.array(list(counts.values())) / N
    assert np.all(np.abs(freq - 1 / 12) < 0.01)


def test_example_instance_passes_assumptions(example_problem):
    rep = validate(example_problem)
    assert rep.ok
    assert rep.assumption2_margin == pytest.approx(0.5)


def test_validate_flags_violations():
    bad = tiny(B=[[-0.6, 0.0]])
    rep = validate(bad)
    assert not rep.assumption1
    assert rep.assumption1_violation[0] == (1,)
    rep2 = validate(tiny(s=[0.25]))
    assert not rep2.assumption2 and rep2.assumption2_violation[0] == 0
    with pytest.raises(DimensionError):
        validate(tiny(r=[-0.1, 0.0]))


@given(st.integers(0, 10**6))
def test_worst_case_check_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    P = random_problem(rng, max_n=3)
    B = P.B + rng.normal(0, 0.3, P.B.shape)  # push some instances over the edge
    P = P.replace(B=B)
    enum_ok = all(np.all(P.A + P.B @ g.K >= -1e-15) for g in enumerate_gains(P))
    assert validate(P).assumption1 == enum_ok


@given(st.integers(0, 10**6))
def test_generated_problems_satisfy_assumptions(seed):
    P = random_problem(seed, zero_blocks=True)
    assert validate(P).ok


def test_json_round_trip(tmp_path, example_problem):
    path = tmp_path / "p.json"
    dump_problem(example_problem, path)
    Q = load_problem(path)
    for name in ("A", "B", "E", "s", "r"):
        np.testing.assert_array_equal(getattr(Q, name), getattr(example_problem, name))
    assert Q.partition == example_problem.partition
    assert json.loads(dump_problem(Q)) == example_problem.to_dict()
    with pytest.raises(DimensionError):
        PositiveProblem.from_dict({"A": [[1]]})


@given(st.integers(0, 10**6))
def test_random_feasible_input_within_budget(seed):
    rng = np.random.default_rng(seed)
    P = random_problem(rng, zero_blocks=True)
    x = rng.uniform(0, 2, P.n)
    u = random_feasible_input(P, x, rng)
    assert np.all(u >= 0)
    budget = P.E @ x
    for i, sl in enumerate(P.block_slices()):
        assert u[sl].sum() <= budget[i] * (1 + 1e-12)


def test_selector_order_is_lexicographic(example_problem):
    sels = [g.selector for g in enumerate_gains(example_problem)]
    assert sels == list(itertools.product(range(2), range(3), range(2)))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=5), st.data())
def test_block_min_matches_naive_loop(partition, data):
    n, m = len(partition), sum(partition)
    P = PositiveProblem(A=np.zeros((n, n)), B=np.zeros((n, m)), E=np.eye(n),
                        s=np.ones(n), r=np.zeros(m), partition=partition)
    v = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=m, max_size=m)))
    expect = [min(0.0, *v[sl]) if sl.stop > sl.start else 0.0 for sl in P.block_slices()]
    np.testing.assert_array_equal(P.block_min(v), expect)
