"""Data correlation statistics and the data-driven Q-factor equation.

The controller keeps two fixed-size matrices,

    Sigma(t)    = lam * Sigma(t-1)    + z z^T,        z = [x(t-1); u(t-1)]
    SigmaBar(t) = lam * SigmaBar(t-1) + x(t) z^T,

whose ratio ``SigmaBar Sigma^{-1}`` is the least-squares model consistent
with the data.  The Q-factor iteration is driven by the operator
``Sigma^{-1} SigmaBar^T`` in place of ``[A B]^T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import dp
from .dp import LPSettings, QParameter, SolveSettings
from .exceptions import DimensionError, InsufficientExcitation, UnstableImpliedModel
from .problem import GainMatrix, PositiveProblem, gain_from_selector

DEFAULT_COND_CAP = 1e12


class CorrelationState:
    """Sufficient statistics ``Sigma`` and ``SigmaBar`` with forgetting factor ``lam``.

    Updates happen in place; use :meth:`copy` to take a snapshot.
    """

    def __init__(self, n, m, lam=1.0, sigma0=1e-6):
        if not 0 < lam <= 1:
            raise ValueError("forgetting factor must lie in (0, 1]")
        self.n, self.m, self.lam = int(n), int(m), float(lam)
        d = self.n + self.m
        sigma0 = np.asarray(sigma0, dtype=float)
        self.Sigma0 = sigma0 * np.eye(d) if sigma0.ndim == 0 else sigma0.copy()
        if self.Sigma0.shape != (d, d):
            raise DimensionError(f"Sigma(0) must be {d}x{d}")
        self.Sigma = self.Sigma0.copy()
        self.SigmaBar = np.zeros((self.n, d))
        self.t = 0

    def copy(self) -> "CorrelationState":
        other = CorrelationState.__new__(CorrelationState)
        other.n, other.m, other.lam, other.t = self.n, self.m, self.lam, self.t
        other.Sigma0 = self.Sigma0.copy()
        other.Sigma = self.Sigma.copy()
        other.SigmaBar = self.SigmaBar.copy()
        return other

    def update(self, x_prev, u_prev, x_next) -> "CorrelationState":
        z = np.concatenate([np.asarray(x_prev, dtype=float).reshape(-1),
                            np.asarray(u_prev, dtype=float).reshape(-1)])
        x_next = np.asarray(x_next, dtype=float).reshape(-1)
        if z.size != self.n + self.m or x_next.size != self.n:
            raise DimensionError("sample dimensions do not match the statistics")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x_next))):
            raise ValueError("non-finite sample rejected")
        if self.lam != 1.0:
            self.Sigma *= self.lam
            self.SigmaBar *= self.lam
        self.Sigma += np.outer(z, z)
        self.SigmaBar += np.outer(x_next, z)
        self.t += 1
        return self

    def to_dict(self) -> dict:
        return {"Sigma": self.Sigma.tolist(), "SigmaBar": self.SigmaBar.tolist(),
                "lambda": self.lam, "t": self.t, "Sigma0": self.Sigma0.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationState":
        SigmaBar = np.array(d["SigmaBar"], dtype=float)
        n, dim = SigmaBar.shape
        st = cls(n, dim - n, d.get("lambda", 1.0),
                 np.array(d.get("Sigma0", np.zeros((dim, dim))), dtype=float))
        st.Sigma = np.array(d["Sigma"], dtype=float)
        st.SigmaBar = SigmaBar
        st.t = int(d.get("t", 0))
        return st

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "CorrelationState":
        return cls.from_dict(json.loads(text))


def update(state: CorrelationState, x_prev, u_prev, x_next) -> CorrelationState:
    """Fold one transition into ``state`` (in place) and return it."""
    return state.update(x_prev, u_prev, x_next)


def from_batch(X, U, X_next, lam=1.0, sigma0=1e-6) -> CorrelationState:
    """Statistics of a batch of transitions given row-wise."""
    X, U, X_next = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (X, U, X_next))
    if U.size == 0:
        U = np.zeros((X.shape[0], 0))
    st = CorrelationState(X.shape[1], U.shape[1], lam, sigma0)
    for x, u, xn in zip(X, U, X_next):
        st.update(x, u, xn)
    return st


@dataclass(frozen=True, eq=False)
class ImpliedModel:
    Ahat: np.ndarray
    Bhat: np.ndarray
    condition: float

    @property
    def operator(self) -> np.ndarray:
        """``Sigma^{-1} SigmaBar^T = [Ahat Bhat]^T``."""
        return np.vstack([self.Ahat.T, self.Bhat.T])


def implied_model(state: CorrelationState, cond_cap: float = DEFAULT_COND_CAP) -> ImpliedModel:
    """Least-squares model ``[Ahat Bhat] = SigmaBar Sigma^{-1}`` via Cholesky."""
    cond = float(np.linalg.cond(state.Sigma))
    if not cond <= cond_cap:
        raise InsufficientExcitation(
            f"Sigma condition number {cond:.3g} exceeds {cond_cap:g}", cond)
    try:
        factor = cho_factor(state.Sigma)
    except LinAlgError as exc:
        raise InsufficientExcitation(f"Sigma is not positive definite: {exc}",
                                     cond) from None
    M = cho_solve(factor, state.SigmaBar.T)
    n = state.n
    return ImpliedModel(M[:n].T.copy(), M[n:].T.copy(), cond)


@dataclass(frozen=True, eq=False)
class DataDrivenSolution:
    q: QParameter
    K: GainMatrix
    p_t: np.ndarray
    model: ImpliedModel


def solve_data_driven(state: CorrelationState, problem: PositiveProblem,
                      settings: SolveSettings = SolveSettings(), q0=None,
                      cond_cap: float = DEFAULT_COND_CAP) -> DataDrivenSolution:
    """Q-factor value iteration driven by the data operator.

    Starts from ``q0`` (zero by default).  ``p_t = [I K^T] q`` solves the
    model-based equation for the implied model.
    """
    model = implied_model(state, cond_cap)
    q, K = dp.solve_q_operator(problem, model.operator, settings, q0=q0,
                               divergence_error=UnstableImpliedModel)
    return DataDrivenSolution(q, K, q.p(problem), model)


def solve_data_driven_lp(state: CorrelationState, problem: PositiveProblem,
                         lp_settings: LPSettings = LPSettings(),
                         cond_cap: float = DEFAULT_COND_CAP) -> DataDrivenSolution:
    model = implied_model(state, cond_cap)
    q = dp.solve_q_lp(model.operator, problem, lp_settings)
    K = gain_from_selector(problem, problem.block_selector(q.qu))
    return DataDrivenSolution(q, K, q.p(problem), model)


def inf_norm(M) -> float:
    """Maximum absolute row sum."""
    M = np.atleast_2d(M)
    return float(np.max(np.abs(M).sum(axis=1), initial=0.0))


def one_norm(M) -> float:
    """Maximum absolute column sum."""
    M = np.atleast_2d(M)
    return float(np.max(np.abs(M).sum(axis=0), initial=0.0))


@dataclass(frozen=True, eq=False)
class MisspecDiagnostics:
    lhs: float
    rho: float
    satisfied: bool
    Atilde: np.ndarray
    Btilde: np.ndarray


LHS_FORMS = ("stated", "proof", "max")


def misspec_lhs(operator, truth: PositiveProblem, form: str = "stated") -> float:
    """Misspecification level of ``operator`` against the true ``(A, B)``.

    ``"stated"``: ``||E^T|| ||A^T - [I 0] M|| + ||B^T - [0 I] M||``.
    ``"proof"``:  ``||A^T - [I 0] M|| + ||E^T|| ||B^T - [0 I] M||``, the
    weighting the envelope argument actually needs.
    ``"max"``: the larger of the two.  All norms are infinity norms; the
    forms coincide when ``||E^T|| = 1``.
    """
    M = np.asarray(operator)
    n = truth.n
    e = inf_norm(truth.E.T)
    a = inf_norm(truth.A.T - M[:n])
    b = inf_norm(truth.B.T - M[n:])
    if form == "stated":
        return e * a + b
    if form == "proof":
        return a + e * b
    if form == "max":
        return max(e * a + b, a + e * b)
    raise ValueError(f"form must be one of {LHS_FORMS}")


def misspec_condition(state: CorrelationState, problem_truth: PositiveProblem,
                      rho: float, cond_cap: float = DEFAULT_COND_CAP,
                      form: str = "stated") -> MisspecDiagnostics:
    model = implied_model(state, cond_cap)
    lhs = misspec_lhs(model.operator, problem_truth, form)
    return MisspecDiagnostics(lhs, float(rho), bool(lhs <= rho),
                              model.Ahat - problem_truth.A,
                              model.Bhat - problem_truth.B)
