"""Model-based solvers for the linear optimal-cost vector ``p``.

The optimal cost from ``x0`` is ``p @ x0`` where ``p`` is the fixed point of

    T(p) = s + A^T p + sum_i min{r_i + B_i^T p, 0} E_i.

Routes provided: value iteration on ``p``, value iteration on the Q-factor
vector ``q = [s + A^T p; r + B^T p]``, a linear program, and a brute-force
enumeration over the finite gain set used as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .exceptions import (EnumerationTooLarge, InfiniteValue, LPError, NonConvergence,
                         NoStabilizingGain, NumericalError)
from .problem import (DEFAULT_ENUM_CAP, GainMatrix, PositiveProblem,
                      gain_count, gain_from_selector, iter_selectors)

STABILITY_THRESHOLD = 1.0 - 1e-9


# stall detection in the Q-factor iteration: the step is sampled every
# STALL_CHECK iterations and must shrink over every STALL_WINDOW
STALL_CHECK = 500
STALL_WINDOW = 2000
# steps this close to the tolerance may be rounding noise, not a stall
STALL_MIN_STEP = 1e4


@dataclass(frozen=True)
class SolveSettings:
    tol: float = 1e-10
    max_iter: int = 100_000
    divergence_bound: float = 1e12

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class LPSettings:
    method: str = "highs-ds"
    feasibility_tol: float = 1e-10
    # re-solve the linear system of the gain the LP picked
    polish: bool = True


@dataclass(frozen=True, eq=False)
class PValue:
    p: np.ndarray
    iterations: int = 0
    residual: float = 0.0


@dataclass(frozen=True, eq=False)
class QParameter:
    qx: np.ndarray
    qu: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.qx, self.qu])

    def p(self, problem: PositiveProblem) -> np.ndarray:
        """``[I K^T] q`` for the gain the Q-factors select."""
        return self.qx + problem.E.T @ problem.block_min(self.qu)


def _as_p(p) -> np.ndarray:
    return np.asarray(p.p if isinstance(p, PValue) else p, dtype=float)


def bellman_operator(problem: PositiveProblem, p: np.ndarray) -> np.ndarray:
    mins = problem.block_min(problem.r + problem.B.T @ p)
    return (problem.s + problem.A.T @ p) + problem.E.T @ mins


def bellman_residual(problem: PositiveProblem, p) -> float:
    """Infinity norm of ``p - T(p)``."""
    p = _as_p(p)
    return float(np.max(np.abs(p - bellman_operator(problem, p)), initial=0.0))


def iterate_p(problem: PositiveProblem, p0=None):
    """Yield the value-iteration sequence ``p^0 = 0, p^1, ...`` forever."""
    p = np.zeros(problem.n) if p0 is None else np.array(p0, dtype=float)
    while True:
        yield p
        p = bellman_operator(problem, p)


def model_operator(problem: PositiveProblem) -> np.ndarray:
    """``[A B]^T``, the ``(n+m) x n`` map from ``p`` to ``q - [s; r]``."""
    return np.vstack([problem.A.T, problem.B.T])


def iterate_q(problem: PositiveProblem, operator=None, q0=None):
    """Yield ``(q^k, p^k)`` of the Q-factor iteration ``q <- M p(q) + [s; r]``.

    ``p^k = [I (K^k)^T] q^k`` where ``K^k`` is read off the blocks of
    ``q^k``.  With ``operator=None`` the true model ``[A B]^T`` is used.
    """
    M = model_operator(problem) if operator is None else np.asarray(operator)
    c = np.concatenate([problem.s, problem.r])
    n = problem.n
    q = np.zeros(n + problem.m) if q0 is None else np.array(q0, dtype=float)
    while True:
        p = q[:n] + problem.E.T @ problem.block_min(q[n:])
        yield q, p
        q = M @ p + c


def solve_p(problem: PositiveProblem, settings: SolveSettings = SolveSettings()) -> PValue:
    """Value iteration on ``p`` from zero until successive iterates agree."""
    p = np.zeros(problem.n)
    for k in range(1, settings.max_iter + 1):
        p_new = bellman_operator(problem, p)
        if not np.all(np.isfinite(p_new)) or np.max(np.abs(p_new)) > settings.divergence_bound:
            raise InfiniteValue(
                f"value iteration exceeded {settings.divergence_bound:g} after {k} "
                "iterations; the problem has no finite value", p_new, k)
        step = np.max(np.abs(p_new - p), initial=0.0)
        p = p_new
        if step <= settings.tol:
            res = bellman_residual(problem, p)
            if res > 10 * settings.tol:
                raise NonConvergence(
                    f"residual {res:.3g} above {10 * settings.tol:g}", p, k)
            return PValue(p, k, res)
    raise NonConvergence(
        f"no convergence within {settings.max_iter} iterations", p, settings.max_iter)


def extract_gain(problem: PositiveProblem, p) -> GainMatrix:
    """Minimising gain: row ``E[i]`` at the most negative entry of ``r_i + B_i^T p``."""
    p = _as_p(p)
    return gain_from_selector(problem, problem.block_selector(problem.r + problem.B.T @ p))


def solve_q_operator(problem: PositiveProblem, operator: np.ndarray,
                     settings: SolveSettings = SolveSettings(), q0=None,
                     divergence_error=InfiniteValue):
    """Run the Q-factor iteration for a given ``(n+m) x n`` operator.

    Returns ``(QParameter, GainMatrix)``.  Shared by the model-based and the
    data-driven solvers.
    """
    n, nm = problem.n, problem.n + problem.m
    M = np.asarray(operator, dtype=float)
    c = np.concatenate([problem.s, problem.r])
    Et = problem.E.T
    # q lives in buf[:nm]; buf[nm] stays 0 so one gather gives the clipped block minima
    buf = np.zeros(nm + 1)
    if q0 is not None:
        buf[:nm] = q0
    idx = problem._pad_idx + n
    bound = settings.divergence_bound
    q_new = np.empty(nm)
    history = []
    for k in range(1, settings.max_iter + 1):
        p = buf[:n] + Et @ buf[idx].min(axis=1)
        np.dot(M, p, out=q_new)
        q_new += c
        qmax = np.abs(q_new).max()
        if not qmax <= bound:  # also catches NaN
            raise divergence_error(
                f"Q-factor iteration exceeded {bound:g} after {k} iterations",
                q_new.copy(), k)
        step = np.abs(q_new - buf[:nm]).max()
        buf[:nm] = q_new
        if step <= settings.tol:
            q = buf[:nm].copy()
            p = q[:n] + Et @ problem.block_min(q[n:])
            res = float(np.max(np.abs(M @ p + c - q)))
            if res > 10 * settings.tol:
                raise NonConvergence(
                    f"residual {res:.3g} above {10 * settings.tol:g}", q, k)
            qp = QParameter(q[:n].copy(), q[n:].copy(), k, res)
            K = gain_from_selector(problem, problem.block_selector(q[n:]))
            return qp, K
        if k % STALL_CHECK == 0:
            # a contracting iteration shrinks its step over any long window;
            # if it has not, the iterates grow or cycle (no finite fixed point
            # is being approached), possibly too slowly to hit the bound
            history.append(step)
            if (len(history) > STALL_WINDOW // STALL_CHECK and step >= history.pop(0)
                    and step > STALL_MIN_STEP * settings.tol):
                raise divergence_error(
                    f"Q-factor iteration stalled: step {step:.3g} after {k} iterations is "
                    f"no smaller than {STALL_WINDOW} iterations earlier", q_new.copy(), k)
    q = buf[:nm].copy()
    raise NonConvergence(
        f"no convergence within {settings.max_iter} iterations", q, settings.max_iter)


def solve_q_model_based(problem: PositiveProblem,
                        settings: SolveSettings = SolveSettings()):
    """Q-factor value iteration with the true model; returns ``(q, K)``."""
    return solve_q_operator(problem, model_operator(problem), settings)


def gain_stack(problem: PositiveProblem, cap: int = DEFAULT_ENUM_CAP):
    """Selectors ``(G, n)`` and gains ``(G, m, n)`` for the whole gain set."""
    count = gain_count(problem)
    if count > cap:
        raise EnumerationTooLarge(
            f"gain set has {count} members, above the cap of {cap}")
    sels = np.array(list(iter_selectors(problem)), dtype=int).reshape(count, problem.n)
    Ks = np.zeros((count, problem.m, problem.n))
    for i, (a0, k) in enumerate(zip(problem.starts, problem.partition)):
        for j in range(1, k + 1):
            Ks[sels[:, i] == j, a0 + j - 1, :] = problem.E[i]
    return sels, Ks


@dataclass(frozen=True, eq=False)
class GainCosts:
    """Per-gain closed-loop costs; ``p[g]`` is ``inf`` for unstable gains."""
    selectors: np.ndarray
    p: np.ndarray
    spectral_radius: np.ndarray
    stable: np.ndarray = field(repr=False)


def gain_costs(problem: PositiveProblem, cap: int = DEFAULT_ENUM_CAP) -> GainCosts:
    """Solve ``p_K = s + K^T r + (A + B K)^T p_K`` for every stable gain."""
    sels, Ks = gain_stack(problem, cap)
    Acl = problem.A[None] + problem.B[None] @ Ks
    rad = np.max(np.abs(np.linalg.eigvals(Acl)), axis=1)
    stable = rad < STABILITY_THRESHOLD
    G, n = sels.shape
    p = np.full((G, n), np.inf)
    if np.any(stable):
        lhs = np.eye(n)[None] - np.transpose(Acl[stable], (0, 2, 1))
        rhs = problem.s[None] + np.einsum("gmn,m->gn", Ks[stable], problem.r)
        p[stable] = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    return GainCosts(sels, p, rad, stable)


def brute_force_p(problem: PositiveProblem, cap: int = DEFAULT_ENUM_CAP,
                  rtol: float = 1e-9):
    """Oracle: elementwise-minimal closed-loop cost over all stable gains.

    Returns ``(PValue, GainMatrix)`` with the lowest-selector gain attaining
    the minimum in every coordinate.
    """
    costs = gain_costs(problem, cap)
    if not np.any(costs.stable):
        raise NoStabilizingGain("no gain in the feasible set stabilises the closed loop")
    finite = costs.p[costs.stable]
    pmin = finite.min(axis=0)
    tol = rtol * max(1.0, float(np.max(np.abs(pmin))))
    hits = np.flatnonzero(np.all(np.abs(costs.p - pmin) <= tol, axis=1))
    if hits.size == 0:
        raise NumericalError(
            "no single gain attains the elementwise minimum; the closed loops "
            "are not all positive")
    g = int(hits[0])
    K = gain_from_selector(problem, costs.selectors[g])
    pval = PValue(costs.p[g].copy(), 0, bellman_residual(problem, costs.p[g]))
    return pval, K


def argmin_gains(problem: PositiveProblem, cap: int = DEFAULT_ENUM_CAP,
                 rtol: float = 1e-9) -> list:
    """Every gain (as distinct ``K`` matrices) attaining the oracle minimum."""
    costs = gain_costs(problem, cap)
    finite = costs.p[costs.stable]
    if finite.size == 0:
        return []
    pmin = finite.min(axis=0)
    tol = rtol * max(1.0, float(np.max(np.abs(pmin))))
    hits = np.flatnonzero(np.all(np.abs(costs.p - pmin) <= tol, axis=1))
    out = []
    for g in hits:
        K = gain_from_selector(problem, costs.selectors[g])
        if not any(np.array_equal(K.K, other.K) for other in out):
            out.append(K)
    return out


def solve_q_lp(operator, problem: PositiveProblem,
               lp_settings: LPSettings = LPSettings()) -> QParameter:
    """Linear-programming route to the Q-factor fixed point.

    Maximises ``1^T p`` over ``p`` and per-block slacks ``y <= 0`` subject to

        p <= (M p + [s; r])_x + E^T y,
        y_i <= (M p + [s; r])_{u, ij}  for every input j of block i,

    and returns ``q = M p + [s; r]``.  ``operator`` is ``[A B]^T`` for the
    true model or ``Sigma^{-1} SigmaBar^T`` for data.
    """
    M = np.asarray(operator, dtype=float)
    n, m = problem.n, problem.m
    if M.shape != (n + m, n):
        raise ValueError(f"operator must be {(n + m, n)}, got {M.shape}")
    Mx, Mu = M[:n], M[n:]
    # variables v = [p, y]
    rows_x = np.hstack([np.eye(n) - Mx, -problem.E.T])
    blk = np.zeros((m, n))
    for i, sl in enumerate(problem.block_slices()):
        blk[sl, i] = 1.0
    rows_u = np.hstack([-Mu, blk])
    A_ub = np.vstack([rows_x, rows_u])
    b_ub = np.concatenate([problem.s, problem.r])
    bounds = [(None, None)] * n + [
        (None, 0.0) if k > 0 else (0.0, 0.0) for k in problem.partition]
    c = np.concatenate([-np.ones(n), np.zeros(n)])
    tol = lp_settings.feasibility_tol
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method=lp_settings.method,
                  options={"primal_feasibility_tolerance": tol,
                           "dual_feasibility_tolerance": tol})
    if res.status == 2:
        raise LPError("LP infeasible", res.status)
    if res.status == 3:
        raise LPError("LP unbounded: the control problem has no finite value", res.status)
    if res.status != 0:
        raise LPError(f"LP solver failed: {res.message}", res.status)
    p = res.x[:n]
    sr = np.concatenate([problem.s, problem.r])
    if lp_settings.polish:
        p = _polish(problem, M, p, sr)
    q = M @ p + sr
    p_of_q = q[:n] + problem.E.T @ problem.block_min(q[n:])
    resid = float(np.max(np.abs(M @ p_of_q + sr - q)))
    return QParameter(q[:n].copy(), q[n:].copy(), int(getattr(res, "nit", 0)), resid)


def _polish(problem, M, p, sr):
    """Re-solve ``p = (M p + c)_x + K^T (M p + c)_u`` for the LP's gain."""
    n = problem.n
    q = M @ p + sr
    K = gain_from_selector(problem, problem.block_selector(q[n:])).K
    lhs = np.eye(n) - M[:n] - K.T @ M[n:]
    rhs = problem.s + K.T @ problem.r
    try:
        p_exact = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return p
    q_exact = M @ p_exact + sr
    same_gain = problem.block_selector(q_exact[n:]) == problem.block_selector(q[n:])
    if same_gain and np.max(np.abs(p_exact - p)) <= 1e-6 * max(1.0, np.max(np.abs(p))):
        return p_exact
    return p
