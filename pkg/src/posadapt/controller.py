"""Online adaptive controller with ε-greedy gain exploration.

The controller follows the usual estimator conventions: constructor
arguments are hyper-parameters (``get_params``/``set_params`` work, and
``sklearn.base.clone`` gives an unfitted copy), learned state lives in
trailing-underscore attributes, ``fit`` builds statistics from a batch of
transitions and ``partial_fit`` folds in more.  ``predict`` maps states to
greedy inputs.  For closed-loop use there are ``act``, ``observe`` and
``end_episode``.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .dp import SolveSettings
from .estimator import CorrelationState, solve_data_driven
from .exceptions import DimensionError, NonConvergence, NumericalError
from .problem import (GainMatrix, PositiveProblem, gain_from_selector, random_gain,
                      random_feasible_input)

logger = logging.getLogger(__name__)

# tolerance for rounding-level negative states coming out of the plant
NEGATIVE_STATE_TOL = 1e-12


class AdaptiveController(BaseEstimator):
    """Certainty-equivalent controller driven by the data-driven Q-equation.

    Parameters
    ----------
    problem : PositiveProblem
        Supplies the costs, the constraint matrix and the input partition.
        Its ``A`` and ``B`` are never read by the controller.
    eps0, alpha : float
        Exploration probability is ``eps0 * alpha**episode``.
    recompute_period : int
        Number of observed transitions between data-driven solves.
    lam : float
        Forgetting factor in ``(0, 1]``.
    sigma0_scale : float
        ``Sigma(0) = sigma0_scale * I``.
    random_state : int, Generator or None
        Seed for the exploration draws.
    settings : SolveSettings, optional
        Stopping rule of the data-driven value iteration.
    warm_start : bool
        Start each solve from the previous Q-factors (falls back to zero on
        failure).
    explore_mix, explore_mix_decay : float
        Additive exploration: the input becomes ``(1 - w) K x + w v`` with
        ``v`` a uniform random feasible input and
        ``w = explore_mix * explore_mix_decay**episode``.  Off by default.
    """

    def __init__(self, problem=None, eps0=0.05, alpha=0.99, recompute_period=1,
                 lam=1.0, sigma0_scale=1e-6, random_state=None, settings=None,
                 warm_start=True, explore_mix=0.0, explore_mix_decay=1.0):
        self.problem = problem
        self.eps0 = eps0
        self.alpha = alpha
        self.recompute_period = recompute_period
        self.lam = lam
        self.sigma0_scale = sigma0_scale
        self.random_state = random_state
        self.settings = settings
        self.warm_start = warm_start
        self.explore_mix = explore_mix
        self.explore_mix_decay = explore_mix_decay

    # -- setup -----------------------------------------------------------
    def _check_params(self):
        if not isinstance(self.problem, PositiveProblem):
            raise TypeError("problem must be a PositiveProblem")
        if not 0 <= self.eps0 <= 1:
            raise ValueError("eps0 must lie in [0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.explore_mix <= 1:
            raise ValueError("explore_mix must lie in [0, 1]")
        if int(self.recompute_period) < 1:
            raise ValueError("recompute_period must be at least 1")

    def reset(self):
        """Discard all data and return to the zero gain."""
        self._check_params()
        P = self.problem
        self.state_ = CorrelationState(P.n, P.m, self.lam, self.sigma0_scale)
        self.gain_ = gain_from_selector(P, (0,) * P.n)
        self.q_ = None
        self.solution_ = None
        self.episode_ = 0
        self.steps_ = 0
        self.n_solves_ = 0
        self.n_failures_ = 0
        self.last_explored_ = False
        self.rng_ = np.random.default_rng(self.random_state)
        self._solve()
        return self

    def _ensure(self):
        if not hasattr(self, "state_"):
            self.reset()

    # -- estimator surface ----------------------------------------------
    def fit(self, X, U, X_next):
        """Build statistics from row-wise transitions ``(x, u, x_next)`` and solve."""
        self.reset()
        self._fold(X, U, X_next)
        self._solve()
        return self

    def partial_fit(self, X, U, X_next):
        """Fold in more transitions, solving per ``recompute_period``."""
        self._ensure()
        X, U, X_next = self._check_batch(X, U, X_next)
        for x, u, xn in zip(X, U, X_next):
            self.observe(x, u, xn)
        return self

    def predict(self, X):
        """Greedy inputs ``K x`` for each row of ``X`` (no exploration)."""
        if not hasattr(self, "gain_"):
            raise NotFittedError("call fit, partial_fit or reset first")
        X = check_array(X, ensure_min_features=0)
        return X @ self.gain_.K.T

    def _check_batch(self, X, U, X_next):
        P = self.problem
        X = check_array(X)
        X_next = check_array(X_next)
        U = np.zeros((X.shape[0], 0)) if P.m == 0 else check_array(U)
        if X.shape[1] != P.n or X_next.shape != X.shape or U.shape != (X.shape[0], P.m):
            raise DimensionError("transition arrays do not match the problem dimensions")
        return X, U, X_next

    def _fold(self, X, U, X_next):
        X, U, X_next = self._check_batch(X, U, X_next)
        for x, u, xn in zip(X, U, X_next):
            self.state_.update(x, u, xn)
            self.steps_ += 1

    # -- closed loop -----------------------------------------------------
    @property
    def epsilon(self) -> float:
        h = getattr(self, "episode_", 0)
        return float(self.eps0 * self.alpha ** h)

    @property
    def mix(self) -> float:
        h = getattr(self, "episode_", 0)
        return float(self.explore_mix * self.explore_mix_decay ** h)

    @property
    def p_t(self):
        return None if self.solution_ is None else self.solution_.p_t

    def act(self, x, rng=None):
        """Return ``(u, used_gain)``; explores with probability ``epsilon``.

        Exploration swaps in a uniformly random feasible gain, and the
        optional additive term mixes in a random feasible input; either way
        ``u`` stays nonnegative and within the block budgets.
        """
        self._ensure()
        x = np.asarray(x, dtype=float)
        if x.shape != (self.problem.n,):
            raise DimensionError(f"state must have length {self.problem.n}")
        if np.any(x < -NEGATIVE_STATE_TOL):
            raise ValueError("state has negative entries")
        x = np.maximum(x, 0.0)
        rng = self.rng_ if rng is None else rng
        eps = self.epsilon
        self.last_explored_ = bool(eps > 0 and rng.random() < eps)
        gain = random_gain(self.problem, rng) if self.last_explored_ else self.gain_
        u = gain.K @ x
        mix = self.mix
        if mix > 0:
            u = (1.0 - mix) * u + mix * random_feasible_input(self.problem, x, rng)
        return u, gain

    def observe(self, x_prev, u_prev, x_next):
        """Fold one transition in; re-solve every ``recompute_period`` steps.

        Solver failures keep the current gain (counted in ``n_failures_``).
        """
        self._ensure()
        self.state_.update(x_prev, u_prev, x_next)
        self.steps_ += 1
        if self.steps_ % int(self.recompute_period) == 0:
            self._solve()
        return self

    def end_episode(self):
        self._ensure()
        self.episode_ += 1
        return self

    def _solve(self):
        settings = self.settings or SolveSettings()
        starts = [self.q_, None] if (self.warm_start and self.q_ is not None) else [None]
        self.n_solves_ += 1
        err = None
        for q0 in starts:
            try:
                sol = solve_data_driven(self.state_, self.problem, settings, q0=q0)
            except NonConvergence as exc:
                # a cold start would stall the same way
                err = exc
                break
            except NumericalError as exc:
                err = exc
                continue
            self.solution_ = sol
            self.q_ = sol.q.q
            self.gain_ = sol.K
            return True
        self.n_failures_ += 1
        logger.debug("data-driven solve failed at step %d: %s", self.steps_, err)
        return False

    def set_gain(self, gain: GainMatrix):
        self._ensure()
        self.gain_ = gain
        return self
