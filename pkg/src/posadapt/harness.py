"""Experiment engine: episodic simulation, regret accounting and CSV output.

Two domains are simulated side by side.  The adaptive controller (and the
fixed optimal gain) act on the positive system

    x(t+1) = A x(t) + B u(t) + w(t),

with episodes ending once ``max|x| <= delta``.  Tabular Q-learning acts on
the underlying SSP when the instance is one.  Regret compares each
episode's cost with an independent optimal-policy rollout in the same
domain.

Every run derives its random streams from ``SeedSequence(seed ^ run)``, so
results do not depend on the order or the process in which runs execute.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import certify as cert
from .controller import AdaptiveController
from .dp import SolveSettings, extract_gain, solve_p
from .estimator import misspec_lhs
from .exceptions import ConfigError, SimulationBlowUp
from .problem import GainMatrix, PositiveProblem
from .ssp import (QTable, SspInstance, convert, exact_ssp_value, example_instance,
                  run_policy_episode, run_qlearning_episode)

logger = logging.getLogger(__name__)

ALGORITHMS = ("adaptive", "qlearning", "optimal")
FLOAT_FMT = ".17g"
# fixed roles of the per-run child seeds; never reorder
_STREAMS = ("plant", "explore", "reference", "ssp", "ssp_reference",
            "optimal_plant", "optimal_reference", "spare")


# -- configuration -------------------------------------------------------

@dataclass(frozen=True)
class Disturbance:
    kind: str = "uniform"
    lo: float = 0.0
    hi: float = 0.01

    def __post_init__(self):
        if self.kind not in ("uniform", "none"):
            raise ConfigError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "uniform" and not self.lo <= self.hi:
            raise ConfigError("disturbance needs lo <= hi")
        if self.kind == "uniform" and self.lo < 0:
            raise ConfigError("disturbance must be nonnegative to keep the state positive")

    def sample(self, rng, n: int) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(n)
        return rng.uniform(self.lo, self.hi, n)

    @classmethod
    def from_dict(cls, d) -> "Disturbance":
        if d is None or d == "none":
            return cls("none", 0.0, 0.0)
        d = dict(d)
        if d.get("kind", "uniform") == "none":
            return cls("none", 0.0, 0.0)
        return cls("uniform", float(d.get("lo", 0.0)), float(d.get("hi", 0.01)))


@dataclass(frozen=True)
class ControllerConfig:
    eps0: float = 0.05
    alpha: float = 0.99
    recompute_period: int = 1
    lam: float = 1.0
    sigma0_scale: float = 1e-6
    explore_mix: float = 0.0
    explore_mix_decay: float = 1.0
    warm_start: bool = True

    @classmethod
    def from_dict(cls, d) -> "ControllerConfig":
        d = dict(d or {})
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        d.pop("seed", None)  # seeds come from the experiment seed
        return cls(**_known(cls, d, "controller"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class QLearningConfig:
    eps0: float = 0.05
    alpha: float = 0.99
    stepsize0: float = 1.0
    omega: float = 0.8

    @classmethod
    def from_dict(cls, d) -> "QLearningConfig":
        d = dict(d or {})
        d.pop("seed", None)
        return cls(**_known(cls, d, "qlearning"))


def _known(cls, d, block):
    names = set(cls.__dataclass_fields__)
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {block} block: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a benchmark.

    ``instance`` is ``"example"`` for the shipped SSP fixture or a path to an
    SSP or problem JSON file (told apart by their keys).
    """

    instance: str = "example"
    algorithms: tuple = ("adaptive", "qlearning")
    episodes: int = 1000
    max_episode_len: int = 1000
    termination_threshold: float = 0.05
    disturbance: Disturbance = field(default_factory=Disturbance)
    runs: int = 20
    seed: int = 0
    x0: tuple | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    qlearning: QLearningConfig = field(default_factory=QLearningConfig)
    rho_monitor: float | None = 0.3
    certify: bool = False
    save_trajectory: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        algs = self.algorithms
        if isinstance(algs, str):
            algs = (algs,)
        algs = tuple(algs)
        if not algs or any(a not in ALGORITHMS for a in algs):
            raise ConfigError(f"algorithms must be a nonempty subset of {ALGORITHMS}")
        object.__setattr__(self, "algorithms", algs)
        if int(self.episodes) < 1:
            raise ConfigError("episodes must be at least 1")
        if int(self.max_episode_len) < 1:
            raise ConfigError("max_episode_len must be at least 1")
        if not self.termination_threshold > 0:
            raise ConfigError("termination_threshold must be positive")
        if int(self.runs) < 1:
            raise ConfigError("runs must be at least 1")
        if int(self.seed) < 0:
            raise ConfigError("seed must be nonnegative")
        if self.rho_monitor is not None and self.rho_monitor < 0:
            raise ConfigError("rho_monitor must be nonnegative")
        if int(self.n_jobs) < 1:
            raise ConfigError("n_jobs must be at least 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = dict(d)
        if "algorithm" in d:
            d["algorithms"] = d.pop("algorithm")
        if "seeds" in d:
            d["seed"] = d.pop("seeds")
        if "instance_path" in d:
            d["instance"] = d.pop("instance_path")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        inst = d.get("instance", "example")
        if inst != "example" and base_dir is not None and not Path(inst).is_absolute():
            inst = str(Path(base_dir) / inst)
        d["instance"] = inst
        d["disturbance"] = Disturbance.from_dict(d.get("disturbance", {}))
        d["controller"] = ControllerConfig.from_dict(d.get("controller"))
        d["qlearning"] = QLearningConfig.from_dict(d.get("qlearning"))
        if d.get("x0") is not None:
            d["x0"] = tuple(float(v) for v in d["x0"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["algorithms"] = list(self.algorithms)
        d["controller"] = self.controller.to_dict()
        d["x0"] = None if self.x0 is None else list(self.x0)
        return d

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(d, base_dir=path.parent)


# -- instances -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Instance:
    problem: PositiveProblem
    ssp: SspInstance | None
    x0: np.ndarray


def load_instance(spec="example", x0=None) -> Instance:
    """Load ``"example"`` or a JSON path; SSPs are converted on the fly.

    The default initial state is the indicator of the SSP start state, or
    the all-ones vector for a bare problem.
    """
    if isinstance(spec, SspInstance):
        ssp = spec
    elif isinstance(spec, PositiveProblem):
        ssp = None
    elif spec == "example":
        ssp = example_instance()
    else:
        try:
            d = json.loads(Path(spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read instance {spec}: {exc}") from None
        ssp = SspInstance.from_dict(d) if "T" in d else None
        if ssp is None:
            spec = PositiveProblem.from_dict(d)
    problem = convert(ssp) if ssp is not None else spec
    if x0 is None:
        x0 = np.zeros(problem.n) if ssp is not None else np.ones(problem.n)
        if ssp is not None:
            x0[ssp.i_init] = 1.0
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.n,) or np.any(x0 < 0):
        raise ConfigError(f"x0 must be a nonnegative vector of length {problem.n}")
    return Instance(problem, ssp, x0)


# -- policies ----------------------------------------------------------------

class FixedGainPolicy:
    """``u = K x`` for a fixed gain."""

    def __init__(self, gain: GainMatrix):
        self.gain = gain

    def act(self, x):
        u = self.gain.K @ x
        return u, u, self.gain, False

    def observe(self, x, u, x_next):
        pass


class ControllerPolicy:
    """Adapter exposing an :class:`AdaptiveController` to :func:`run_episode`.

    ``act`` also returns the nominal input ``K(t) x`` so that the realised
    exploration ``u - K(t) x`` can be logged.
    """

    def __init__(self, controller: AdaptiveController, truth: PositiveProblem | None = None,
                 certifier=None):
        self.controller = controller
        self.truth = truth
        self.certifier = certifier
        self.lhs_at_act = np.nan
        self.lhs_cert = np.nan

    def act(self, x):
        c = self.controller
        c._ensure()
        nominal = c.gain_.K @ np.maximum(x, 0.0)
        if self.truth is not None and c.solution_ is not None:
            op = c.solution_.model.operator
            self.lhs_at_act = misspec_lhs(op, self.truth)
            if self.certifier is not None:
                # certificates refer to the solution that produced K(t)
                self.lhs_cert = misspec_lhs(op, self.truth, "max")
                self.certifier.before_act(c, self.lhs_cert)
        u, gain = c.act(x)
        return u, nominal, gain, c.last_explored_ or c.mix > 0

    def observe(self, x, u, x_next):
        self.controller.observe(x, u, x_next)


# -- episodes ----------------------------------------------------------------

@dataclass
class EpisodeResult:
    cost: float
    steps: int
    terminated: bool
    trajectory: dict | None = None


def run_episode(problem: PositiveProblem, policy, x0, disturbance: Disturbance, rng,
                delta: float = 0.05, t_max: int = 1000, record: bool = False,
                episode: int | None = None, step_hook=None) -> EpisodeResult:
    """Simulate one episode and accumulate ``s^T x + r^T u``.

    The episode stops before acting once ``max|x| <= delta``, or after
    ``t_max`` steps.  ``policy.act(x)`` returns ``(u, nominal_u, gain,
    explored)``.  ``step_hook(t, x, u, nominal, w, x_next)`` runs after the
    policy has observed the transition.
    """
    A, B, s, r = problem.A, problem.B, problem.s, problem.r
    x = np.array(x0, dtype=float)
    cost, t = 0.0, 0
    rows = {k: [] for k in ("x", "u", "nominal", "w", "x_next", "gain", "explored", "cost")}
    terminated = False
    while True:
        if np.max(np.abs(x), initial=0.0) <= delta:
            terminated = True
            break
        if t >= t_max:
            break
        u, nominal, gain, explored = policy.act(x)
        w = disturbance.sample(rng, problem.n)
        x_next = A @ x + B @ u + w
        if not np.all(np.isfinite(x_next)):
            raise SimulationBlowUp(f"non-finite state at step {t}", episode)
        stage = float(s @ x + r @ u)
        cost += stage
        policy.observe(x, u, x_next)
        if record:
            for k, v in (("x", x), ("u", u), ("nominal", nominal), ("w", w),
                         ("x_next", x_next), ("gain", gain.selector),
                         ("explored", explored), ("cost", stage)):
                rows[k].append(v)
        if step_hook is not None:
            step_hook(t, x, u, nominal, w, x_next)
        x = x_next
        t += 1
    traj = None
    if record:
        traj = {k: np.array(v, dtype=float) if k not in ("gain",) else list(v)
                for k, v in rows.items()}
    return EpisodeResult(cost, t, terminated, traj)


def optimal_reference_cost(problem: PositiveProblem, K_opt: GainMatrix, x0,
                           disturbance: Disturbance, rng, delta: float = 0.05,
                           t_max: int = 1000) -> float:
    """Cost of one optimal-gain rollout on its own disturbance stream."""
    return run_episode(problem, FixedGainPolicy(K_opt), x0, disturbance, rng,
                       delta, t_max).cost


# -- regret records --------------------------------------------------------

@dataclass
class RegretRecord:
    """Per-episode results of one run of one algorithm."""

    costs: np.ndarray
    references: np.ndarray
    lengths: np.ndarray
    lhs: np.ndarray | None = None
    truncated: int = 0

    @property
    def regret(self) -> np.ndarray:
        return np.cumsum(self.costs - self.references)


@dataclass
class CertificationTally:
    """Counts of certificate checks; ``violations`` lists the first few failures."""

    steps_checked: int = 0
    theorem1_violations: int = 0
    theorem2_violations: int = 0
    tight_checked: int = 0
    tight_theorem1_violations: int = 0
    tight_theorem2_violations: int = 0
    windows_checked: int = 0
    windows_vacuous: int = 0
    corollary_violations: int = 0
    violations: list = field(default_factory=list)

    def merge(self, other: "CertificationTally") -> "CertificationTally":
        out = CertificationTally()
        for k in asdict(out):
            if k == "violations":
                out.violations = (self.violations + other.violations)[:20]
            else:
                setattr(out, k, getattr(self, k) + getattr(other, k))
        return out

    @property
    def ok(self) -> bool:
        return (self.theorem1_violations == 0 and self.theorem2_violations == 0
                and self.tight_theorem1_violations == 0
                and self.tight_theorem2_violations == 0
                and self.corollary_violations == 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


class _Certifier:
    """Per-step certificate checks for one adaptive run.

    ``lhs`` is the larger of the stated and proof forms of the
    misspecification level, so both readings of the hypothesis hold.
    At each step where the measured misspecification ``lhs`` satisfies
    ``lhs <= rho`` the envelope and gain inequalities are checked at the
    monitored ``rho`` and at the tightest admissible level ``rho = lhs``.
    The cost bound is checked on every suffix window of each episode at
    ``rho`` equal to the largest ``lhs`` over the window, whenever that
    yields a positive contraction factor.
    """

    def __init__(self, truth: PositiveProblem, p, rho):
        self.truth = truth
        self.p = np.asarray(p, dtype=float)
        self.beta = cert.beta_of(truth, self.p)
        self.rho = rho
        self.tally = CertificationTally()
        self._window = []

    def _check(self, rho, p_t, K, tight):
        t1, info = cert.theorem1_bounds(self.p, p_t, self.beta, rho)
        t2 = cert.theorem2_inequality(self.truth, self.p, K, self.beta, rho)
        T = self.tally
        if tight:
            T.tight_checked += 1
            T.tight_theorem1_violations += not t1
            T.tight_theorem2_violations += not t2
        else:
            T.steps_checked += 1
            T.theorem1_violations += not t1
            T.theorem2_violations += not t2
        if (not t1 or not t2) and len(T.violations) < 20:
            T.violations.append({"rho": rho, "theorem1": t1, "theorem2": t2, **info})

    def before_act(self, controller: AdaptiveController, lhs: float):
        sol = controller.solution_
        if sol is None or not np.isfinite(lhs):
            return
        if self.rho is not None and lhs <= self.rho and self.rho * self.beta < 1:
            self._check(self.rho, sol.p_t, sol.K, tight=False)
        if lhs * self.beta < 1:
            self._check(lhs, sol.p_t, sol.K, tight=True)

    def record_step(self, lhs, x, u, nominal, w):
        self._window.append((lhs, x.copy(), u.copy(), u - nominal, w.copy()))

    def end_episode(self):
        rows, self._window = self._window, []
        T = self.tally
        for t0 in range(len(rows)):
            rho = max(r[0] for r in rows[t0:])
            if not np.isfinite(rho) or rho * self.beta >= 1:
                T.windows_vacuous += 1
                continue
            gamma = cert.corollary1_gamma(self.truth, self.p, self.beta, rho)
            if gamma is None:
                T.windows_vacuous += 1
                continue
            T.windows_checked += 1
            bound = cert.corollary1_cost_bound(
                self.truth, [r[1:] for r in rows[t0:]], self.p, self.beta, gamma)
            if not bound.holds:
                T.corollary_violations += 1
                if len(T.violations) < 20:
                    T.violations.append({"corollary": asdict(bound), "rho": rho,
                                         "gamma": gamma, "t0": t0})


def _streams(seed: int, run: int) -> dict:
    children = np.random.SeedSequence(int(seed) ^ int(run)).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


def make_controller(cfg: ControllerConfig, problem: PositiveProblem, rng) -> AdaptiveController:
    return AdaptiveController(
        problem=problem, eps0=cfg.eps0, alpha=cfg.alpha,
        recompute_period=cfg.recompute_period, lam=cfg.lam,
        sigma0_scale=cfg.sigma0_scale, random_state=rng, warm_start=cfg.warm_start,
        explore_mix=cfg.explore_mix, explore_mix_decay=cfg.explore_mix_decay)


def _run_adaptive(config: ExperimentConfig, inst: Instance, K_opt, p_opt, streams,
                  trajectory_sink=None):
    P = inst.problem
    ctrl = make_controller(config.controller, P, streams["explore"]).reset()
    certifier = _Certifier(P, p_opt, config.rho_monitor) if config.certify else None
    policy = ControllerPolicy(ctrl, truth=P, certifier=certifier)
    H = int(config.episodes)
    costs, refs, lengths, lhs = (np.zeros(H) for _ in range(4))
    truncated = 0

    def hook(t, x, u, nominal, w, x_next):
        if certifier is not None:
            certifier.record_step(policy.lhs_cert, x, u, nominal, w)

    for h in range(H):
        res = run_episode(P, policy, inst.x0, config.disturbance, streams["plant"],
                          config.termination_threshold, config.max_episode_len,
                          record=trajectory_sink is not None, episode=h, step_hook=hook)
        if certifier is not None:
            certifier.end_episode()
        costs[h] = res.cost
        lengths[h] = res.steps
        truncated += not res.terminated
        refs[h] = optimal_reference_cost(P, K_opt, inst.x0, config.disturbance,
                                         streams["reference"], config.termination_threshold,
                                         config.max_episode_len)
        lhs[h] = (misspec_lhs(ctrl.solution_.model.operator, P)
                  if ctrl.solution_ is not None else np.nan)
        if trajectory_sink is not None:
            trajectory_sink(h, res.trajectory)
        ctrl.end_episode()
    rec = RegretRecord(costs, refs, lengths, lhs, truncated)
    return rec, (certifier.tally if certifier is not None else None), ctrl


def _run_optimal(config, inst, K_opt, streams):
    P, H = inst.problem, int(config.episodes)
    costs, refs, lengths = np.zeros(H), np.zeros(H), np.zeros(H)
    truncated = 0
    policy = FixedGainPolicy(K_opt)
    for h in range(H):
        res = run_episode(P, policy, inst.x0, config.disturbance, streams["optimal_plant"],
                          config.termination_threshold, config.max_episode_len, episode=h)
        costs[h], lengths[h] = res.cost, res.steps
        truncated += not res.terminated
        refs[h] = optimal_reference_cost(P, K_opt, inst.x0, config.disturbance,
                                         streams["optimal_reference"],
                                         config.termination_threshold, config.max_episode_len)
    return RegretRecord(costs, refs, lengths, None, truncated)


def _run_qlearning(config, inst, policy_opt, streams):
    ssp, q, H = inst.ssp, config.qlearning, int(config.episodes)
    table = QTable.for_instance(ssp)
    costs, refs, lengths = np.zeros(H), np.zeros(H), np.zeros(H)
    truncated = 0
    for h in range(H):
        eps = q.eps0 * q.alpha ** h
        costs[h], steps = run_qlearning_episode(ssp, table, eps, streams["ssp"],
                                                config.max_episode_len, q.stepsize0, q.omega)
        lengths[h] = steps
        refs[h], steps_ref = run_policy_episode(ssp, policy_opt, streams["ssp_reference"],
                                                config.max_episode_len)
        truncated += steps >= config.max_episode_len
    return RegretRecord(costs, refs, lengths, None, truncated)


@dataclass
class RunResult:
    run: int
    records: dict
    certification: CertificationTally | None
    failures: dict
    trajectory: list | None = None


def _solve_reference(inst: Instance):
    pv = solve_p(inst.problem, SolveSettings(tol=1e-12))
    K = extract_gain(inst.problem, pv.p)
    policy = exact_ssp_value(inst.ssp)[1] if inst.ssp is not None else None
    return pv.p, K, policy


def run_single(config: ExperimentConfig, run: int, inst: Instance | None = None,
               reference=None) -> RunResult:
    """One run of every configured algorithm, with streams derived from ``run``."""
    inst = inst or load_instance(config.instance, config.x0)
    p_opt, K_opt, policy_opt = reference or _solve_reference(inst)
    streams = _streams(config.seed, run)
    records, failures, tally, traj = {}, {}, None, None
    for alg in config.algorithms:
        try:
            if alg == "adaptive":
                sink = None
                if config.save_trajectory and run == 0:
                    traj = []
                    sink = lambda h, tr: traj.append((h, tr))  # noqa: E731
                records[alg], tally, ctrl = _run_adaptive(config, inst, K_opt, p_opt,
                                                          streams, sink)
                failures[alg] = ctrl.n_failures_
            elif alg == "optimal":
                records[alg] = _run_optimal(config, inst, K_opt, streams)
            else:
                records[alg] = _run_qlearning(config, inst, policy_opt, streams)
        except SimulationBlowUp as exc:
            logger.warning("run %d of %s excluded: %s (episode %s)", run, alg, exc, exc.episode)
            records[alg] = None
    return RunResult(run, records, tally, failures, traj)


def _run_star(args):
    return run_single(*args)


# -- aggregation -------------------------------------------------------------

def mean_ci(values: np.ndarray, z: float = 1.96):
    """Column-wise mean and normal-approximation band across rows."""
    values = np.atleast_2d(values)
    mean = values.mean(axis=0)
    k = values.shape[0]
    half = z * values.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.zeros_like(mean)
    return mean, mean - half, mean + half


def sublinear(regret: np.ndarray) -> bool:
    """Last-quartile average of ``R(h)/h`` strictly below the first-quartile one."""
    H = regret.size
    h = np.arange(1, H + 1)
    rate = regret / h
    q = max(H // 4, 1)
    return bool(rate[-q:].mean() < rate[:q].mean())


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list
    beta: float
    p: np.ndarray
    gamma: float | None

    def records(self, alg: str) -> list:
        return [r.records[alg] for r in self.runs if r.records.get(alg) is not None]

    def excluded(self, alg: str) -> int:
        return sum(r.records.get(alg) is None for r in self.runs)

    def regret_matrix(self, alg: str) -> np.ndarray:
        return np.array([rec.regret for rec in self.records(alg)])

    def lhs_matrix(self) -> np.ndarray:
        return np.array([rec.lhs for rec in self.records("adaptive")])

    def satisfaction(self) -> np.ndarray:
        rho = self.config.rho_monitor
        return (self.lhs_matrix() <= rho).mean(axis=0)

    def certification(self) -> CertificationTally | None:
        tallies = [r.certification for r in self.runs if r.certification is not None]
        if not tallies:
            return None
        out = CertificationTally()
        for t in tallies:
            out = out.merge(t)
        return out

    def summary(self) -> dict:
        cfg = self.config
        out = {"config": cfg.to_dict(), "beta": self.beta, "p": self.p.tolist(),
               "gamma": self.gamma, "algorithms": {}}
        if cfg.rho_monitor is not None and cfg.rho_monitor * self.beta < 1:
            a_check, a_hat = cert.alphas(self.beta, cfg.rho_monitor)
            out["alpha_check"], out["alpha_hat"] = a_check, a_hat
        for alg in cfg.algorithms:
            R = self.regret_matrix(alg)
            entry = {"excluded_runs": self.excluded(alg), "runs": int(R.shape[0])}
            if R.size:
                mean, lo, hi = mean_ci(R)
                recs = self.records(alg)
                entry.update({
                    "final_regret_mean": float(mean[-1]),
                    "final_regret_ci": [float(lo[-1]), float(hi[-1])],
                    "final_regret_per_run": [float(v) for v in R[:, -1]],
                    "sublinear": sublinear(mean),
                    "mean_episode_cost": float(np.mean([r.costs.mean() for r in recs])),
                    "mean_reference_cost": float(np.mean([r.references.mean() for r in recs])),
                    "truncated_episodes": int(sum(r.truncated for r in recs)),
                })
            out["algorithms"][alg] = entry
        if "adaptive" in cfg.algorithms and self.records("adaptive"):
            out["solver_failures"] = int(sum(r.failures.get("adaptive", 0) for r in self.runs))
            if cfg.rho_monitor is not None:
                frac = self.satisfaction()
                full = np.flatnonzero(frac >= 1.0)
                below = np.flatnonzero(self.lhs_matrix().mean(axis=0) < cfg.rho_monitor)
                out["condition"] = {
                    "rho": cfg.rho_monitor,
                    "final_lhs_mean": float(self.lhs_matrix().mean(axis=0)[-1]),
                    "final_satisfied_fraction": float(frac[-1]),
                    "first_episode_mean_below_rho": int(below[0]) + 1 if below.size else None,
                    "first_episode_all_satisfied": int(full[0]) + 1 if full.size else None,
                }
        tally = self.certification()
        if tally is not None:
            out["certification"] = tally.to_dict()
        return out


def regret_experiment(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Run ``config.runs`` independent runs and collect their records.

    Runs are distributed over ``config.n_jobs`` processes; the reduction
    happens in run-index order so the outcome does not depend on it.
    """
    inst = load_instance(config.instance, config.x0)
    if "qlearning" in config.algorithms and inst.ssp is None:
        raise ConfigError("qlearning needs an SSP instance")
    reference = _solve_reference(inst)
    p_opt = reference[0]
    args = [(config, run, inst, reference) for run in range(int(config.runs))]
    if int(config.n_jobs) > 1:
        with ProcessPoolExecutor(int(config.n_jobs)) as pool:
            runs = list(pool.map(_run_star, args))
    else:
        runs = []
        for a in args:
            runs.append(run_single(*a))
            if progress is not None:
                progress(a[1])
    beta = cert.beta_of(inst.problem, p_opt)
    gamma = None
    if config.rho_monitor is not None and config.rho_monitor * beta < 1:
        gamma = cert.corollary1_gamma(inst.problem, p_opt, beta, config.rho_monitor)
    return ExperimentResult(config, runs, beta, p_opt, gamma)


# -- output ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), FLOAT_FMT)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_regret_csv(result: ExperimentResult, path):
    H = int(result.config.episodes)
    header, cols = ["episode"], []
    for alg in result.config.algorithms:
        R = result.regret_matrix(alg)
        mean, lo, hi = mean_ci(R) if R.size else (np.full(H, np.nan),) * 3
        header += [f"mean_{alg}", f"ci_lo_{alg}", f"ci_hi_{alg}"]
        cols += [mean, lo, hi]
    write_csv(path, header, ([h + 1] + [c[h] for c in cols] for h in range(H)))


def write_condition_csv(result: ExperimentResult, path):
    L = result.lhs_matrix()
    mean, lo, hi = mean_ci(L)
    frac = result.satisfaction()
    write_csv(path, ["episode", "lhs", "lhs_ci_lo", "lhs_ci_hi", "satisfied"],
              ([h + 1, mean[h], lo[h], hi[h], frac[h]] for h in range(L.shape[1])))


def trajectory_header(n: int, m: int) -> list:
    return (["episode", "t"] + [f"x_{i}" for i in range(1, n + 1)]
            + [f"u_{j}" for j in range(1, m + 1)]
            + [f"nominal_{j}" for j in range(1, m + 1)]
            + [f"w_{i}" for i in range(1, n + 1)]
            + [f"xnext_{i}" for i in range(1, n + 1)]
            + ["gain", "explored", "cost"])


def write_trajectory_csv(episodes, n: int, m: int, path):
    """``episodes`` is a list of ``(episode_index, trajectory_dict)``."""
    def rows():
        for h, tr in episodes:
            for t in range(len(tr["cost"])):
                yield ([h + 1, t] + list(tr["x"][t]) + list(tr["u"][t])
                       + list(tr["nominal"][t]) + list(tr["w"][t]) + list(tr["x_next"][t])
                       + ["-".join(str(j) for j in tr["gain"][t]),
                          bool(tr["explored"][t]), tr["cost"][t]])
    write_csv(path, trajectory_header(n, m), rows())


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`: list of per-step dicts."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        n = sum(f.startswith("x_") for f in fields)
        m = sum(f.startswith("u_") for f in fields)
        out = []
        for row in reader:
            def vec(prefix, k):
                return np.array([float(row[f"{prefix}_{i}"]) for i in range(1, k + 1)])
            out.append({"episode": int(row["episode"]), "t": int(row["t"]),
                        "x": vec("x", n), "u": vec("u", m), "nominal": vec("nominal", m),
                        "w": vec("w", n), "x_next": vec("xnext", n),
                        "gain": tuple(int(j) for j in row["gain"].split("-")),
                        "explored": bool(int(row["explored"])), "cost": float(row["cost"])})
    return out


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"regret": out / "regret.csv", "summary": out / "summary.json"}
    write_regret_csv(result, paths["regret"])
    if "adaptive" in result.config.algorithms and result.records("adaptive"):
        paths["condition"] = out / "condition.csv"
        write_condition_csv(result, paths["condition"])
        first = result.runs[0]
        if first.trajectory is not None:
            paths["trajectory"] = out / "trajectory.csv"
            P = load_instance(result.config.instance, result.config.x0).problem
            write_trajectory_csv(first.trajectory, P.n, P.m, paths["trajectory"])
    dump_json(result.summary(), paths["summary"])
    return paths


# -- replay ------------------------------------------------------------------

def replay_certification(problem: PositiveProblem, steps, rho=None,
                         controller_cfg: ControllerConfig = ControllerConfig()):
    """Rebuild the statistics of a logged adaptive run and re-check the certificates.

    The data-driven solution at each step is recomputed from the logged
    transitions; the logged nominal inputs give the realised exploration.
    """
    p = solve_p(problem, SolveSettings(tol=1e-12)).p
    certifier = _Certifier(problem, p, rho)
    ctrl = make_controller(replace(controller_cfg, eps0=0.0, explore_mix=0.0),
                           problem, 0).reset()
    episode = None
    for st in steps:
        if episode is not None and st["episode"] != episode:
            certifier.end_episode()
        episode = st["episode"]
        lhs = (misspec_lhs(ctrl.solution_.model.operator, problem, "max")
               if ctrl.solution_ is not None else np.nan)
        certifier.before_act(ctrl, lhs)
        certifier.record_step(lhs, st["x"], st["u"], st["nominal"], st["w"])
        ctrl.observe(st["x"], st["u"], st["x_next"])
    certifier.end_episode()
    return certifier.tally, certifier.beta
