"""Positive linear control problems with per-block input budgets.

A problem instance is the tuple ``(A, B, E, s, r)`` together with a
partition of the ``m`` inputs into ``n`` blocks.  Block ``i`` holds ``m_i``
inputs whose sum is bounded by ``E[i] @ x``.  Optimal feedback gains live
in the finite set of matrices whose blocks either carry the row ``E[i]``
in exactly one position or are zero.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import DimensionError, EnumerationTooLarge

DEFAULT_ENUM_CAP = 10**6
ASSUMPTION2_MARGIN = 1e-12


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=float, ndmin=ndim)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PositiveProblem:
    """Problem instance ``(A, B, E, s, r)`` with an input partition.

    Arrays are copied and made read-only on construction.  Only structural
    consistency is checked here; the standing assumptions are reported by
    :func:`validate`.  Blocks with ``m_i = 0`` are allowed (a state whose
    constraint row has no input attached).
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    s: np.ndarray
    r: np.ndarray
    partition: tuple
    starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = _frozen(self.A, 2, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        partition = tuple(int(k) for k in self.partition)
        if len(partition) != n:
            raise DimensionError(
                f"partition has {len(partition)} blocks, expected n={n}")
        if any(k < 0 for k in partition):
            raise DimensionError("partition entries must be nonnegative")
        m = sum(partition)
        B = np.array(self.B, dtype=float)
        if B.size == 0:
            B = np.zeros((n, m))
        B = _frozen(B, 2, "B")
        if B.shape != (n, m):
            raise DimensionError(f"B must be {n}x{m}, got {B.shape}")
        E = _frozen(self.E, 2, "E")
        if E.shape != (n, n):
            raise DimensionError(f"E must be {n}x{n}, got {E.shape}")
        s = _frozen(self.s, 1, "s")
        if s.shape != (n,):
            raise DimensionError(f"s must have length {n}, got {s.shape}")
        r = _frozen(np.reshape(self.r, -1), 1, "r")
        if r.shape != (m,):
            raise DimensionError(f"r must have length {m}, got {r.shape}")
        for name, arr in (("A", A), ("B", B), ("E", E), ("s", s), ("r", r)):
            if not np.all(np.isfinite(arr)):
                raise DimensionError(f"{name} has non-finite entries")
        starts = np.concatenate([[0], np.cumsum(partition)[:-1]]).astype(int)
        starts.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "partition", partition)
        object.__setattr__(self, "starts", starts)
        # gather table for block_min: row i lists block i's indices, padded
        # (at least once) with index m, which points at an appended zero
        width = max(partition, default=0) + 1
        pad = np.full((n, width), m, dtype=np.intp)
        for i, (a, k) in enumerate(zip(starts, partition)):
            pad[i, :k] = np.arange(a, a + k)
        object.__setattr__(self, "_pad_idx", pad)
        object.__setattr__(self, "_block_of", np.repeat(np.arange(n), partition))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def block_slices(self) -> list:
        return [slice(a, a + k) for a, k in zip(self.starts, self.partition)]

    def block_min(self, v: np.ndarray) -> np.ndarray:
        """Per-block ``min{v_i, 0}`` (the smallest entry, or 0 if none is negative)."""
        return np.append(v, 0.0)[self._pad_idx].min(axis=1)

    def block_selector(self, v: np.ndarray) -> tuple:
        """Gain selector from per-block scores ``v`` (length ``m``).

        Block ``i`` selects row ``j`` (1-based) at the most negative entry of
        ``v_i``, lowest index on ties, or 0 ("off") if no entry is negative.
        """
        sel = []
        for a, k in zip(self.starts, self.partition):
            if k == 0:
                sel.append(0)
                continue
            block = v[a:a + k]
            j = int(np.argmin(block))
            sel.append(j + 1 if block[j] < 0 else 0)
        return tuple(sel)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "E": self.E.tolist(),
            "s": self.s.tolist(),
            "r": self.r.tolist(),
            "partition": list(self.partition),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PositiveProblem":
        missing = {"A", "B", "E", "s", "r", "partition"} - set(d)
        if missing:
            raise DimensionError(f"problem document lacks keys {sorted(missing)}")
        return cls(A=d["A"], B=d["B"], E=d["E"], s=d["s"], r=d["r"],
                   partition=d["partition"])

    def replace(self, **changes) -> "PositiveProblem":
        d = {"A": self.A, "B": self.B, "E": self.E, "s": self.s, "r": self.r,
             "partition": self.partition}
        d.update(changes)
        return PositiveProblem(**d)


def load_problem(path) -> PositiveProblem:
    with open(path) as fh:
        return PositiveProblem.from_dict(json.load(fh))


def dump_problem(problem: PositiveProblem, path=None, indent=2):
    """Write ``problem`` as JSON to ``path``; return the text if ``path`` is None."""
    text = json.dumps(problem.to_dict(), indent=indent)
    if path is None:
        return text
    Path(path).write_text(text + "\n")


def extended_constraint(problem: PositiveProblem) -> np.ndarray:
    """The ``m x n`` matrix whose block ``i`` repeats ``E[i]`` ``m_i`` times."""
    return np.repeat(problem.E, problem.partition, axis=0)


@dataclass(frozen=True, eq=False)
class GainMatrix:
    """A member of the feasible gain set.

    ``selector[i]`` is 0 when block ``i`` is off, otherwise the 1-based row of
    block ``i`` that carries ``E[i]``.
    """

    K: np.ndarray
    selector: tuple

    def __eq__(self, other):
        if not isinstance(other, GainMatrix):
            return NotImplemented
        return self.selector == other.selector and np.array_equal(self.K, other.K)

    def __hash__(self):
        return hash(self.selector)

    def __repr__(self):
        return f"GainMatrix(selector={self.selector})"


def gain_from_selector(problem: PositiveProblem, selector: Sequence[int]) -> GainMatrix:
    selector = tuple(int(j) for j in selector)
    if len(selector) != problem.n:
        raise DimensionError(f"selector needs {problem.n} entries")
    K = np.zeros((problem.m, problem.n))
    for i, (a, k, j) in enumerate(zip(problem.starts, problem.partition, selector)):
        if not 0 <= j <= k:
            raise DimensionError(f"selector[{i}]={j} outside 0..{k}")
        if j:
            K[a + j - 1] = problem.E[i]
    K.setflags(write=False)
    return GainMatrix(K, selector)


def is_feasible_gain(problem: PositiveProblem, K: np.ndarray, atol=0.0) -> bool:
    """Membership test: every block sums to ``E[i]`` or to zero."""
    K = np.asarray(K, dtype=float)
    if K.shape != (problem.m, problem.n) or np.any(K < -atol):
        return False
    for i, sl in enumerate(problem.block_slices()):
        colsum = K[sl].sum(axis=0)
        if not (np.allclose(colsum, problem.E[i], rtol=0, atol=atol)
                or np.allclose(colsum, 0.0, rtol=0, atol=atol)):
            return False
    return True


def gain_count(problem: PositiveProblem) -> int:
    return math.prod(k + 1 for k in problem.partition)


def iter_selectors(problem: PositiveProblem) -> Iterator[tuple]:
    return itertools.product(*(range(k + 1) for k in problem.partition))


def enumerate_gains(problem: PositiveProblem, cap: int = DEFAULT_ENUM_CAP) -> list:
    """All feasible gains in lexicographic selector order (off before row 1)."""
    count = gain_count(problem)
    if count > cap:
        raise EnumerationTooLarge(
            f"gain set has {count} members, above the cap of {cap}")
    return [gain_from_selector(problem, sel) for sel in iter_selectors(problem)]


def random_gain(problem: PositiveProblem, rng_seed=None) -> GainMatrix:
    """Uniform draw over the selector space.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    sel = [int(rng.integers(k + 1)) for k in problem.partition]
    return gain_from_selector(problem, sel)


@dataclass(frozen=True)
class ValidationReport:
    assumption1: bool
    assumption2: bool
    # (selector, row, col, value) of the most negative closed-loop entry
    assumption1_violation: tuple | None = None
    # (index, margin) of the smallest s - Ebar^T r entry
    assumption2_violation: tuple | None = None
    assumption2_margin: float = math.inf

    @property
    def ok(self) -> bool:
        return self.assumption1 and self.assumption2

    def to_dict(self) -> dict:
        return {
            "assumption1": self.assumption1,
            "assumption2": self.assumption2,
            "assumption1_violation": self.assumption1_violation,
            "assumption2_violation": self.assumption2_violation,
            "assumption2_margin": self.assumption2_margin,
        }


def worst_closed_loop(problem: PositiveProblem):
    """Elementwise minimum of ``A + B K`` over the whole gain set.

    Entry ``(a, b)`` of ``B K`` is ``sum_i B[a, col_i] * E[i, b]``; with
    ``E >= 0`` each block is minimised independently, so no enumeration is
    needed.  Returns the matrix and, per entry, the minimising selector.
    """
    n = problem.n
    worst = problem.A.copy()
    choice = np.zeros((n, n, n), dtype=int)  # [a, b, i]
    for i, (a0, k) in enumerate(zip(problem.starts, problem.partition)):
        if k == 0:
            continue
        Bi = problem.B[:, a0:a0 + k]
        jmin = np.argmin(Bi, axis=1)
        bmin = Bi[np.arange(n), jmin]
        neg = bmin < 0
        contrib = np.where(neg, bmin, 0.0)[:, None] * problem.E[i][None, :]
        worst = worst + contrib
        choice[:, :, i] = np.where(neg, jmin + 1, 0)[:, None]
    return worst, choice


def validate(problem: PositiveProblem) -> ValidationReport:
    """Check closed-loop positivity over the gain set and ``s > Ebar^T r``."""
    if np.any(problem.E < 0) or np.any(problem.s < 0) or np.any(problem.r < 0):
        raise DimensionError("E, s and r must be elementwise nonnegative")
    worst, choice = worst_closed_loop(problem)
    a1 = bool(np.all(worst >= 0))
    v1 = None
    if not a1:
        a, b = np.unravel_index(np.argmin(worst), worst.shape)
        v1 = (tuple(int(j) for j in choice[a, b]), int(a), int(b),
              float(worst[a, b]))
    margin = problem.s - extended_constraint(problem).T @ problem.r
    a2 = bool(np.all(margin >= ASSUMPTION2_MARGIN))
    idx = int(np.argmin(margin))
    v2 = None if a2 else (idx, float(margin[idx]))
    return ValidationReport(a1, a2, v1, v2, float(margin[idx]))


def random_problem(rng, n=None, max_block=3, max_n=5, rho_max=0.9,
                   zero_blocks=False) -> PositiveProblem:
    """Random instance satisfying both standing assumptions.

    ``A`` dominates the negative parts of ``B`` so every gain keeps the
    closed loop nonnegative; ``A`` and ``B`` are scaled together so the
    open loop has spectral radius ``rho_max`` (the zero gain stabilises).
    """
    rng = np.random.default_rng(rng)
    if n is None:
        n = int(rng.integers(1, max_n + 1))
    lo = 0 if zero_blocks else 1
    partition = [int(rng.integers(lo, max_block + 1)) for _ in range(n)]
    m = sum(partition)
    E = rng.uniform(0.0, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < 0.7)
    E[np.arange(n), np.arange(n)] += rng.uniform(0.2, 1.0, n)
    neg = rng.uniform(0.0, 1.0, (n, n))  # per-block negative budget N_i
    A = rng.uniform(0.0, 0.5, (n, n)) + neg.T @ E / max(n, 1)
    B = np.zeros((n, m))
    starts = np.concatenate([[0], np.cumsum(partition)[:-1]]).astype(int)
    for i, (a0, k) in enumerate(zip(starts, partition)):
        for j in range(k):
            frac = rng.uniform(0.0, 1.0, n)
            B[:, a0 + j] = (-frac * neg[i] / max(n, 1)
                            + rng.uniform(0.0, 0.5, n) * (rng.uniform(size=n) < 0.5))
    rad = max(abs(np.linalg.eigvals(A)))
    scale = rho_max / rad
    A *= scale
    B *= scale
    r = rng.uniform(0.0, 1.0, m)
    Ebar = np.repeat(E, partition, axis=0)
    s = Ebar.T @ r + rng.uniform(0.1, 2.0, n)
    return PositiveProblem(A=A, B=B, E=E, s=s, r=r, partition=partition)


def random_feasible_input(problem: PositiveProblem, x, rng) -> np.ndarray:
    """Uniform random point of ``{u >= 0 : 1^T u_i <= E[i] @ x}``.

    Each block splits its budget by a flat Dirichlet draw over its inputs
    plus one slack share (normalised exponentials).
    """
    rng = np.random.default_rng(rng)
    budget = problem.E @ np.asarray(x, dtype=float)
    n, m = problem.n, problem.m
    g = rng.standard_exponential(m + n)
    ids = problem._block_of
    total = np.bincount(ids, g[:m], minlength=n) + g[m:]
    return budget[ids] * (g[:m] / total[ids])
