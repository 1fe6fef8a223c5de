"""Command line entry point (``posadapt``).

Exit codes: 0 success, 1 certificate violation found by ``certify``,
2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dp, harness
from .dp import LPSettings, SolveSettings
from .exceptions import ConfigError, NumericalError, PosAdaptError
from .problem import dump_problem, validate
from .ssp import SspInstance, convert, example_instance

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=harness._json_default))


def _config(args) -> harness.ExperimentConfig:
    cfg = (harness.load_config(args.config) if args.config
           else harness.ExperimentConfig())
    return cfg.with_overrides(instance=getattr(args, "instance", None), seed=args.seed,
                              runs=getattr(args, "runs", None), episodes=args.episodes)


def cmd_solve(args):
    inst = harness.load_instance(args.instance)
    P = inst.problem
    if args.method == "vi":
        pv = dp.solve_p(P, SolveSettings(tol=args.tol))
        q, K = dp.solve_q_model_based(P, SolveSettings(tol=args.tol))
        p, iters = pv.p, pv.iterations
    else:
        q = dp.solve_q_lp(dp.model_operator(P), P, LPSettings())
        p, iters = q.p(P), None
        K = dp.extract_gain(P, p)
    _print_json({"method": args.method, "p": p, "qx": q.qx, "qu": q.qu,
                 "gain": list(K.selector), "K": K.K, "iterations": iters,
                 "assumptions": validate(P).to_dict()})
    return EXIT_OK


def cmd_convert(args):
    if args.ssp == "example":
        ssp = example_instance()
    else:
        try:
            ssp = SspInstance.from_dict(json.loads(Path(args.ssp).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.ssp}: {exc}") from None
    text = dump_problem(convert(ssp))
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _run_and_write(cfg, out_dir):
    res = harness.regret_experiment(cfg)
    paths = harness.write_outputs(res, out_dir)
    summary = res.summary()
    summary.pop("config")
    _print_json({"outputs": {k: str(v) for k, v in paths.items()}, **summary})
    return res


def cmd_simulate(args):
    cfg = _config(args).with_overrides(runs=1, save_trajectory=True, n_jobs=1)
    if args.algorithm:
        cfg = cfg.with_overrides(algorithms=(args.algorithm,))
    _run_and_write(cfg, args.out_dir)
    return EXIT_OK


def cmd_benchmark(args):
    cfg = _config(args).with_overrides(n_jobs=args.n_jobs)
    if args.certify:
        cfg = cfg.with_overrides(certify=True)
    _run_and_write(cfg, args.out_dir)
    return EXIT_OK


def cmd_certify(args):
    inst = harness.load_instance(args.instance)
    steps = harness.read_trajectory_csv(args.trajectory)
    if not steps:
        raise ConfigError("trajectory file has no rows")
    if steps[0]["x"].size != inst.problem.n:
        raise ConfigError("trajectory does not match the instance dimensions")
    tally, beta = harness.replay_certification(inst.problem, steps, args.rho)
    _print_json({"beta": beta, "rho": args.rho, "steps": len(steps), **tally.to_dict()})
    return EXIT_OK if tally.ok else EXIT_VIOLATION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posadapt",
                                 description="Adaptive control of positive systems.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="print p, q and the optimal gain")
    p.add_argument("--instance", default="example", help="problem/SSP JSON or 'example'")
    p.add_argument("--method", choices=("vi", "lp"), default="vi")
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("convert", help="SSP JSON to problem JSON")
    p.add_argument("--ssp", default="example", help="SSP JSON or 'example'")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_convert)

    for name, func, hlp in (("simulate", cmd_simulate, "single run with trajectory CSV"),
                            ("benchmark", cmd_benchmark, "regret experiment")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", help="experiment JSON")
        p.add_argument("--instance", help="override the config instance")
        p.add_argument("--out-dir", default="results")
        p.add_argument("--seed", type=int)
        p.add_argument("--episodes", type=int)
        if name == "benchmark":
            p.add_argument("--runs", type=int)
            p.add_argument("--n-jobs", type=int, default=1)
            p.add_argument("--certify", action="store_true",
                           help="check the certificates at every step")
        else:
            p.add_argument("--algorithm", choices=harness.ALGORITHMS)
        p.set_defaults(func=func)

    p = sub.add_parser("certify", help="replay a trajectory CSV through the certificates")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--instance", default="example")
    p.add_argument("--rho", type=float, default=0.3)
    p.set_defaults(func=cmd_certify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PosAdaptError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
