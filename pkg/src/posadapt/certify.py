"""Robustness certificates for the data-driven controller.

Given the true optimal cost vector ``p``, a stabilisability level ``beta``
and a misspecification level ``rho`` with ``rho * beta < 1``:

* the data-driven cost vector obeys ``alpha_hat p <= p(t) <= p / alpha_check``
  with ``alpha_check = 1 - rho beta`` and ``alpha_hat = 1 - rho beta / alpha_check``;
* the deployed gain satisfies
  ``theta p - s >= A^T p + K^T (r + B^T p)`` with
  ``theta = (1 + rho beta (1 + beta ||A + |B| Ebar||_1)) / alpha_check``;
* the incurred cost over a window is bounded through a contraction factor
  ``gamma`` in ``(0, 1]``.

Matrix norms: ``inf`` is the maximum absolute row sum, ``1`` the maximum
absolute column sum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .estimator import one_norm
from .exceptions import HypothesisViolated
from .problem import GainMatrix, PositiveProblem, extended_constraint

SLACK = 1e-9


def beta_of(problem: PositiveProblem, p) -> float:
    """Smallest ``beta`` with ``p <= beta * min(s) * 1``."""
    return float(np.max(p) / np.min(problem.s))


def m_beta_check(problem: PositiveProblem, p, beta: float, rtol: float = 1e-12) -> bool:
    """``s <= p <= beta * min_i(s_i) * 1`` elementwise."""
    p = np.asarray(getattr(p, "p", p), dtype=float)
    upper = beta * np.min(problem.s)
    return bool(np.all(problem.s <= p * (1 + rtol))
                and np.all(p <= upper * (1 + rtol)))


def closed_loop_bound(problem: PositiveProblem) -> float:
    """``||A + |B| Ebar||_1``."""
    return one_norm(problem.A + np.abs(problem.B) @ extended_constraint(problem))


@dataclass(frozen=True)
class CertificationReport:
    beta: float
    rho: float
    alpha_check: float
    alpha_hat: float
    theta: float
    gamma: float | None
    closed_loop_norm: float
    bounds_hold: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _require(beta, rho):
    if beta < 0 or rho < 0:
        raise HypothesisViolated("beta and rho must be nonnegative")
    if rho * beta >= 1:
        raise HypothesisViolated(
            f"rho * beta = {rho * beta:.4g} >= 1: the certificates do not apply")


def alphas(beta: float, rho: float):
    """``(alpha_check, alpha_hat)``."""
    _require(beta, rho)
    a_check = 1.0 - rho * beta
    return a_check, 1.0 - rho * beta / a_check


def theta_of(problem: PositiveProblem, beta: float, rho: float) -> float:
    a_check, _ = alphas(beta, rho)
    return (1.0 + rho * beta * (1.0 + beta * closed_loop_bound(problem))) / a_check


def report(problem: PositiveProblem, p, beta: float, rho: float,
           bounds_hold: dict | None = None) -> CertificationReport:
    a_check, a_hat = alphas(beta, rho)
    return CertificationReport(
        beta=float(beta), rho=float(rho), alpha_check=a_check, alpha_hat=a_hat,
        theta=theta_of(problem, beta, rho),
        gamma=corollary1_gamma(problem, p, beta, rho),
        closed_loop_norm=closed_loop_bound(problem),
        bounds_hold=dict(bounds_hold or {}))


def theorem1_bounds(p, p_t, beta: float, rho: float):
    """Check ``alpha_hat p <= p_t <= p / alpha_check`` with absolute slack 1e-9.

    Returns ``(holds, info)``; ``info`` carries the constants and the
    smallest margin on each side (negative when violated).
    """
    a_check, a_hat = alphas(beta, rho)
    p = np.asarray(getattr(p, "p", p), dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    lower = p_t - a_hat * p
    upper = p / a_check - p_t
    info = {"alpha_check": a_check, "alpha_hat": a_hat,
            "lower_margin": float(lower.min()), "upper_margin": float(upper.min())}
    holds = bool(lower.min() >= -SLACK and upper.min() >= -SLACK)
    return holds, info


def theorem2_inequality(problem: PositiveProblem, p, K_t, beta: float, rho: float) -> bool:
    """``theta p - s >= A^T p + K_t^T (r + B^T p)`` elementwise, slack 1e-9."""
    p = np.asarray(getattr(p, "p", p), dtype=float)
    K = K_t.K if isinstance(K_t, GainMatrix) else np.asarray(K_t, dtype=float)
    theta = theta_of(problem, beta, rho)
    lhs = theta * p - problem.s
    rhs = problem.A.T @ p + K.T @ (problem.r + problem.B.T @ p)
    return bool(np.all(lhs >= rhs - SLACK))


def corollary1_gamma(problem: PositiveProblem, p, beta: float, rho: float):
    """Largest ``gamma`` in ``(0, 1]`` with

        gamma (s - Ebar^T |r|) <= s - Ebar^T |r|
                                  - (1/alpha_check - 1 + rho beta (1 + beta N)) beta s,

    ``N = ||A + |B| Ebar||_1``.  Returns None if no positive ``gamma`` exists.
    """
    a_check, _ = alphas(beta, rho)
    base = problem.s - extended_constraint(problem).T @ np.abs(problem.r)
    if np.any(base <= 0):
        return None
    excess = 1.0 / a_check - 1.0 + rho * beta * (1.0 + beta * closed_loop_bound(problem))
    rhs = base - excess * beta * problem.s
    gamma = float(np.min(rhs / base))
    if gamma <= 0:
        return None
    return min(gamma, 1.0)


@dataclass(frozen=True)
class CostBound:
    lhs: float
    rhs: float
    holds: bool


def corollary1_cost_bound(problem: PositiveProblem, trajectory, p, beta: float,
                          gamma: float, t0: int = 0, rtol: float = SLACK) -> CostBound:
    """Evaluate the windowed cost bound from ``t0`` to the end of ``trajectory``.

    ``trajectory`` is a sequence of ``(x, u, eps_effect, w)``; the nominal
    input is ``u - eps_effect = K(t) x`` and ``B eps_effect + w`` is the
    total perturbation.
    """
    p = np.asarray(getattr(p, "p", p), dtype=float)
    s, r, B = problem.s, problem.r, problem.B
    rows = list(trajectory)[t0:]
    if not rows:
        return CostBound(0.0, 0.0, True)
    lhs = 0.0
    pert = 0.0
    for x, u, eps_eff, w in rows:
        x, u, eps_eff, w = (np.asarray(a, dtype=float) for a in (x, u, eps_eff, w))
        lhs += s @ x + r @ (u - eps_eff)
        pert += beta * (s @ np.abs(B @ eps_eff + w))
    x_start = np.asarray(rows[0][0], dtype=float)
    rhs = (p @ x_start + pert) / gamma
    return CostBound(float(lhs), float(rhs), bool(lhs <= rhs * (1 + rtol) + rtol))
