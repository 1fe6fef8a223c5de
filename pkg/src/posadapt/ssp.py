"""Stochastic shortest path instances, their conversion, and tabular Q-learning.

States are 0-based internally; state ``n`` is the absorbing, cost-free goal.
JSON documents use the 1-based ``i_init`` convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources

import numpy as np

from .exceptions import ConversionError, DimensionError, ImproperInstance
from .problem import PositiveProblem

PROB_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class SspInstance:
    """Transition matrices ``T[i]`` of shape ``(n+1, a_i)`` and cost rows ``c[i]``.

    Column ``j`` of ``T[i]`` is the successor distribution of action ``j``
    from state ``i``; rows are the states followed by the goal.
    """

    T: tuple
    c: tuple
    i_init: int = 0

    def __post_init__(self):
        T = tuple(np.array(t, dtype=float, ndmin=2) for t in self.T)
        c = tuple(np.array(ci, dtype=float, ndmin=1).reshape(-1) for ci in self.c)
        if len(T) != len(c):
            raise DimensionError("T and c must list the same number of states")
        n = len(T)
        for i, (t, ci) in enumerate(zip(T, c)):
            if t.shape[0] != n + 1:
                raise DimensionError(f"T[{i}] must have {n + 1} rows, got {t.shape[0]}")
            if t.shape[1] != ci.size or ci.size == 0:
                raise DimensionError(f"state {i}: {t.shape[1]} actions but {ci.size} costs")
            if np.any(t < 0) or np.any(np.abs(t.sum(axis=0) - 1) > PROB_ATOL):
                raise DimensionError(f"columns of T[{i}] are not distributions")
            t.setflags(write=False)
            ci.setflags(write=False)
        if not 0 <= self.i_init < n:
            raise DimensionError(f"i_init={self.i_init} is not a non-goal state")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "i_init", int(self.i_init))

    @property
    def n_states(self) -> int:
        return len(self.T)

    @property
    def goal(self) -> int:
        return len(self.T)

    @property
    def n_actions(self) -> tuple:
        return tuple(ci.size for ci in self.c)

    @classmethod
    def from_dict(cls, d: dict) -> "SspInstance":
        T, c = list(d["T"]), list(d["c"])
        if len(T) == len(c) and len(T) >= 2:
            last = np.array(T[-1], dtype=float, ndmin=2)
            if last.shape == (len(T), 1):
                # trailing goal entry: must be absorbing and free
                goal_col = np.zeros(len(T))
                goal_col[-1] = 1.0
                cost = np.array(c[-1], dtype=float).reshape(-1)
                if np.allclose(last[:, 0], goal_col) and np.all(cost == 0):
                    T, c = T[:-1], c[:-1]
        return cls(T=T, c=c, i_init=int(d.get("i_init", 1)) - 1)

    def to_dict(self) -> dict:
        return {"T": [t.tolist() for t in self.T],
                "c": [ci.tolist() for ci in self.c],
                "i_init": self.i_init + 1}


def load_ssp(path) -> SspInstance:
    with open(path) as fh:
        return SspInstance.from_dict(json.load(fh))


def example_instance() -> SspInstance:
    """The bundled four-state (three plus goal) benchmark instance."""
    text = resources.files("posadapt.data").joinpath("ssp3.json").read_text()
    return SspInstance.from_dict(json.loads(text))


def _dec(x) -> Decimal:
    return Decimal(repr(float(x)))


def reference_actions(ssp: SspInstance) -> list:
    return [int(np.argmin(ci)) for ci in ssp.c]


def convert(ssp: SspInstance) -> PositiveProblem:
    """Map an SSP onto the positive control problem (``E = I``).

    Per state the cheapest action (lowest index on ties) is the reference:
    its successor column goes into ``A`` and its cost into ``s``.  Each other
    action contributes a ``B`` column (its successor column minus the
    reference one) and an ``r`` entry (its extra cost).  Differences are
    taken in decimal arithmetic so decimal inputs map exactly.
    """
    n = ssp.n_states
    A = np.zeros((n, n))
    cols, r, s, partition = [], [], np.zeros(n), []
    for i, (t, ci) in enumerate(zip(ssp.T, ssp.c)):
        ref = int(np.argmin(ci))
        if ci[ref] < 0:
            raise ConversionError(f"state {i}: negative stage cost {ci[ref]}")
        A[:, i] = t[:n, ref]
        s[i] = ci[ref]
        others = [j for j in range(ci.size) if j != ref]
        partition.append(len(others))
        for j in others:
            gap = _dec(ci[j]) - _dec(ci[ref])
            if gap < 0:
                raise ConversionError(f"state {i}, action {j}: negative cost gap")
            r.append(float(gap))
            cols.append([float(_dec(t[k, j]) - _dec(t[k, ref])) for k in range(n)])
    B = np.column_stack(cols) if cols else np.zeros((n, 0))
    return PositiveProblem(A=A, B=B, E=np.eye(n), s=s, r=np.array(r),
                           partition=partition)


def ssp_step(ssp: SspInstance, state: int, action: int, rng):
    """Sample a successor and return ``(next_state, cost)``.

    The realized cost is the expected stage cost of the action.
    """
    if state == ssp.goal:
        return ssp.goal, 0.0
    col = ssp.T[state][:, action]
    nxt = int(rng.choice(ssp.goal + 1, p=col))
    return nxt, float(ssp.c[state][action])


def goal_reachable(ssp: SspInstance) -> set:
    """States from which some action sequence reaches the goal with positive probability."""
    reach = {ssp.goal}
    grew = True
    while grew:
        grew = False
        for i, t in enumerate(ssp.T):
            if i not in reach and np.any(t[sorted(reach)] > 0):
                reach.add(i)
                grew = True
    reach.discard(ssp.goal)
    return reach


def exact_ssp_value(ssp: SspInstance, tol: float = 1e-12, max_iter: int = 1_000_000,
                    divergence_bound: float = 1e12):
    """Optimal costs-to-go by value iteration; returns ``(values, policy)``.

    ``values`` has length ``n + 1`` with the goal last (always 0); ``policy``
    lists the greedy action per non-goal state (lowest index on ties).
    """
    n = ssp.n_states
    stuck = sorted(set(range(n)) - goal_reachable(ssp))
    if stuck:
        raise ImproperInstance(f"states {stuck} cannot reach the goal under any policy")
    V = np.zeros(n + 1)
    for _ in range(max_iter):
        Qs = [ci + t.T @ V for t, ci in zip(ssp.T, ssp.c)]
        V_new = np.zeros(n + 1)
        V_new[:n] = [qs.min() for qs in Qs]
        if not np.all(np.isfinite(V_new)) or np.max(np.abs(V_new)) > divergence_bound:
            raise ImproperInstance("SSP value iteration diverged; no proper policy")
        step = np.max(np.abs(V_new - V))
        V = V_new
        if step <= tol:
            Qs = [ci + t.T @ V for t, ci in zip(ssp.T, ssp.c)]
            return V, [int(np.argmin(qs)) for qs in Qs]
    raise ImproperInstance(f"SSP value iteration did not converge in {max_iter} sweeps")


class QTable:
    """Tabular Q-factors with per-pair visit counts; the goal row stays 0."""

    def __init__(self, n_actions, goal_actions: int = 1):
        self.q = [np.zeros(a) for a in n_actions] + [np.zeros(goal_actions)]
        self.visits = [np.zeros(a, dtype=int) for a in n_actions] + [
            np.zeros(goal_actions, dtype=int)]

    @classmethod
    def for_instance(cls, ssp: SspInstance) -> "QTable":
        return cls(ssp.n_actions)

    @property
    def goal(self) -> int:
        return len(self.q) - 1

    def greedy(self, state: int) -> int:
        return int(np.argmin(self.q[state]))

    def greedy_policy(self) -> list:
        return [self.greedy(i) for i in range(self.goal)]

    def update(self, state, action, cost, next_state, stepsize0=1.0, omega=0.8):
        if state == self.goal:
            return self
        eta = stepsize0 / (1.0 + self.visits[state][action]) ** omega
        target = cost + self.q[next_state].min()
        self.q[state][action] = (1.0 - eta) * self.q[state][action] + eta * target
        self.visits[state][action] += 1
        return self


def q_learning_update(table: QTable, state, action, cost, next_state,
                      stepsize0=1.0, omega=0.8) -> QTable:
    """One Q-learning step, ``Q <- (1 - eta) Q + eta (cost + min Q(next))``.

    The stepsize is ``stepsize0 / (1 + visits)^omega``; ``table`` is updated
    in place and returned.
    """
    return table.update(state, action, cost, next_state, stepsize0, omega)


def run_qlearning_episode(ssp: SspInstance, table: QTable, eps: float, rng,
                          t_max: int = 1000, stepsize0=1.0, omega=0.8):
    """ε-greedy episode from ``i_init`` to the goal; returns ``(cost, steps)``."""
    state, total, t = ssp.i_init, 0.0, 0
    while state != ssp.goal and t < t_max:
        if rng.random() < eps:
            action = int(rng.integers(ssp.n_actions[state]))
        else:
            action = table.greedy(state)
        nxt, cost = ssp_step(ssp, state, action, rng)
        table.update(state, action, cost, nxt, stepsize0, omega)
        total += cost
        state = nxt
        t += 1
    return total, t


def run_policy_episode(ssp: SspInstance, policy, rng, t_max: int = 1000):
    """Roll out a fixed policy from ``i_init``; returns ``(cost, steps)``."""
    state, total, t = ssp.i_init, 0.0, 0
    while state != ssp.goal and t < t_max:
        state, cost = ssp_step(ssp, state, policy[state], rng)
        total += cost
        t += 1
    return total, t


def random_ssp(rng, n=None, max_actions=3, goal_min=0.1) -> SspInstance:
    """Random proper SSP: every action reaches the goal w.p. at least ``goal_min``.

    Costs keep the converted problem inside the standing assumptions: the
    cost gaps of a state sum to less than its cheapest cost.
    """
    rng = np.random.default_rng(rng)
    if n is None:
        n = int(rng.integers(3, 7))
    T, c = [], []
    for _ in range(n):
        a = int(rng.integers(1, max_actions + 1))
        cols = rng.dirichlet(np.ones(n + 1), size=a).T
        g = rng.uniform(goal_min, 1.0, a)
        cols[:n] *= (1.0 - g) / np.maximum(cols[:n].sum(axis=0), 1e-300)
        cols[n] = g
        cols /= cols.sum(axis=0)
        base = rng.uniform(1.0, 2.0)
        gaps = rng.uniform(0.0, base / max(a, 1), a)
        gaps[rng.integers(a)] = 0.0
        T.append(cols)
        c.append(base + gaps)
    return SspInstance(T=T, c=c, i_init=0)
