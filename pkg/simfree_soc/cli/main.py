"""
Command-line front end: ``simfree-soc {train,eval,sample,bench}``.

Exit codes: 0 on success, 1 for usage, configuration, checkpoint or file errors,
2 when a run aborts on a numerical failure.
"""
import argparse
import json
import os
import sys
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
import torch as th

import simfree_soc
from simfree_soc.cli.config import ExperimentConfig, build_policy, build_problem, dump_preset, load_config
from simfree_soc.common.errors import CheckpointError, ConfigError, NumericalError
from simfree_soc.common.evaluation import l2_error
from simfree_soc.common.policies import FunctionPolicy
from simfree_soc.common.rng import WalkerStreams
from simfree_soc.common.sde import make_randomized_grid, sample_wiener_increments
from simfree_soc.common.utils import configure_logger, set_num_threads
from simfree_soc.estimators import objective_statistics, offpolicy_objective, simfree_gradient, vanilla_gradient
from simfree_soc.sampling import finetune_weights, follmer_sample, save_samples, save_summary, summarize
from simfree_soc.train.solver import SocSolver

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

# Walkers of the estimator cross-checks reported by ``eval``
CROSSCHECK_WALKERS = 256


class _ArgumentParser(argparse.ArgumentParser):
    """Report usage errors with the configuration exit code."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_arg_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--preset", help="Preset used when no config file is given")
    common.add_argument("--seed", type=int, help="Master seed (overrides run.seed)")
    common.add_argument("--out", help="Output directory (overrides run.out)")
    common.add_argument("--threads", type=int, help="Worker threads, 0 for one per core (overrides run.threads)")
    common.add_argument("-v", "--verbose", type=int, help="0 silent, 1 info, 2 debug (overrides run.verbose)")

    parser = _ArgumentParser(prog="simfree-soc", description="Simulation-free training of stochastic optimal controls.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {simfree_soc.__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", parents=[common], help="Train a policy")
    train.add_argument("--dump-preset", metavar="NAME", help="Print a preset as YAML and exit")

    evaluate = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True, help="Parameter checkpoint")

    sample = subparsers.add_parser("sample", parents=[common], help="Draw weighted samples (Follmer and fine-tuning problems)")
    sample.add_argument("--checkpoint", help="Parameter checkpoint; the initial policy when missing")
    sample.add_argument("--n", type=int, help="Number of samples (overrides sampling.n)")

    subparsers.add_parser("bench", parents=[common], help="Compare the cost of the estimators across step counts")
    return parser


def _load(args: argparse.Namespace, extra: Optional[Dict[str, Dict[str, Any]]] = None) -> ExperimentConfig:
    if args.config is None and args.preset is None:
        raise ConfigError("either --config or --preset is required")
    run = {key: getattr(args, key) for key in ("seed", "out", "threads", "verbose") if getattr(args, key) is not None}
    overrides = dict(extra or {}, run=run)
    config = load_config(args.config, preset=args.preset, overrides=overrides)
    set_num_threads(config.run.threads)
    return config


def _write_json(record: Dict[str, Any], path: str) -> None:
    with open(path, "w") as file_handler:
        json.dump(record, file_handler, indent=2, sort_keys=True)
        file_handler.write("\n")


def _relative_gap(a: th.Tensor, b: th.Tensor) -> float:
    scale = max(float(th.linalg.vector_norm(a)), float(th.linalg.vector_norm(b)), 1e-300)
    return float(th.linalg.vector_norm(a - b)) / scale


def cmd_train(args: argparse.Namespace) -> int:
    if args.dump_preset is not None:
        print(dump_preset(args.dump_preset), end="")
        return EXIT_OK
    config = _load(args)
    out = config.run.out
    os.makedirs(out, exist_ok=True)
    bundle = build_problem(config.problem)
    policy = build_policy(config, bundle)
    record = {
        "command": "train",
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "version": simfree_soc.__version__,
    }
    _write_json(record, os.path.join(out, "run.json"))

    logger = configure_logger(config.run.verbose, out, extra_formats=("csv",))
    solver = SocSolver(bundle.problem, policy, config.train, logger=logger, log_dir=out, verbose=config.run.verbose)
    try:
        solver.learn()
    finally:
        logger.close()
    final = os.path.join(out, f"ckpt_{solver.num_iterations}.bin")
    solver.save(final)
    if config.run.verbose > 0:
        print(f"Trained {solver.num_iterations} iterations, checkpoint saved to {final}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args)
    bundle = build_problem(config.problem)
    problem = bundle.problem
    policy = build_policy(config, bundle)
    header = policy.load_checkpoint(args.checkpoint)
    train = config.train

    streams = WalkerStreams(config.run.seed).evaluation()
    grid = make_randomized_grid(train.n_steps, problem.horizon, streams.grid(), train.grid_mode)
    wiener = sample_wiener_increments(grid, train.n_walkers, problem.dim, streams, threads=config.run.threads)
    mean, std_err, diverged = objective_statistics(problem, policy, grid, wiener, deterministic=train.deterministic)
    report = {
        "problem": problem.name,
        "checkpoint": args.checkpoint,
        "iteration": header.get("meta", {}).get("iteration"),
        "n": train.n_walkers,
        "n_steps": train.n_steps,
        "objective": mean,
        "std_err": std_err,
        "diverged": diverged,
    }
    if problem.optimal_control is not None:
        report["l2_err"] = l2_error(problem, policy, n=train.l2_walkers, n_steps=train.n_steps, seed=config.run.seed)

    reference = FunctionPolicy.zero(problem.dim, problem.horizon)
    try:
        offpolicy = offpolicy_objective(problem, policy, reference, grid, wiener, deterministic=train.deterministic)
        report["offpolicy"] = {
            "reference": "zero",
            "objective": offpolicy.loss,
            "std_err": offpolicy.std_err,
            "max_abs_log_weight": offpolicy.max_abs_log_weight,
        }
    except NumericalError as error:
        report["offpolicy"] = {"reference": "zero", "error": str(error)}

    n_check = min(train.n_walkers, CROSSCHECK_WALKERS)
    # Walker streams do not depend on the walker count: these are the first walkers of the batch above
    check_wiener = sample_wiener_increments(grid, n_check, problem.dim, streams, threads=config.run.threads)
    direct = simfree_gradient(problem, policy, grid, check_wiener, path="direct", deterministic=train.deterministic)
    stopgrad = simfree_gradient(problem, policy, grid, check_wiener, path="stopgrad", deterministic=train.deterministic)
    vanilla = vanilla_gradient(problem, policy, grid, check_wiener, deterministic=train.deterministic)
    report["crosscheck"] = {
        "n": n_check,
        "direct_vs_stopgrad": _relative_gap(direct.grad, stopgrad.grad),
        "simfree_vs_vanilla": _relative_gap(direct.grad, vanilla.grad),
        "simfree_grad_norm": float(th.linalg.vector_norm(direct.grad)),
        "vanilla_grad_norm": float(th.linalg.vector_norm(vanilla.grad)),
    }

    os.makedirs(config.run.out, exist_ok=True)
    _write_json(report, os.path.join(config.run.out, "eval.json"))
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    extra = {"sampling": {"n": args.n}} if args.n is not None else None
    config = _load(args, extra)
    bundle = build_problem(config.problem)
    problem = bundle.problem
    policy = build_policy(config, bundle)
    if args.checkpoint is not None:
        policy.load_checkpoint(args.checkpoint)
    if problem.kind == "follmer":
        draw = follmer_sample
    elif problem.kind == "finetune":
        draw = finetune_weights
    else:
        raise ConfigError(f"sampling needs a Follmer or fine-tuning problem, got '{problem.kind}'", field="problem.kind")

    sampling = config.sampling
    meta = {"checkpoint": args.checkpoint}
    streams = WalkerStreams(config.run.seed).evaluation()
    samples = draw(
        problem,
        policy,
        sampling.n,
        sampling.n_steps,
        streams,
        grid_mode=sampling.grid_mode,
        threads=config.run.threads,
        meta=meta,
    )
    os.makedirs(config.run.out, exist_ok=True)
    save_samples(samples, os.path.join(config.run.out, "samples.csv"))
    summary = summarize(samples)
    summary.update(problem=problem.name, n_steps=sampling.n_steps, diverged=samples.meta["diverged"])
    save_summary(summary, os.path.join(config.run.out, "summary.json"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load(args)
    bundle = build_problem(config.problem)
    problem = bundle.problem
    bench, train = config.bench, config.train
    estimators: Dict[str, Callable] = {
        "simfree": lambda *a: simfree_gradient(*a, path=train.path, accumulation=train.accumulation),
        "vanilla": vanilla_gradient,
    }
    rows: List[Dict[str, Any]] = []
    for grid_mode in bench.grid_modes:
        for n_steps in bench.steps:
            for name, estimator in estimators.items():
                policy = build_policy(config, bundle)
                streams = WalkerStreams(config.run.seed)
                timings = []
                for repeat in range(bench.repeats):
                    iteration_streams = streams.for_iteration(repeat)
                    grid = make_randomized_grid(n_steps, problem.horizon, iteration_streams.grid(), grid_mode)
                    wiener = sample_wiener_increments(
                        grid, bench.n_walkers, problem.dim, iteration_streams, threads=config.run.threads
                    )
                    start = time.perf_counter()
                    estimate = estimator(problem, policy, grid, wiener)
                    timings.append(time.perf_counter() - start)
                rows.append(
                    dict(
                        grid_mode=grid_mode,
                        estimator=name,
                        n_steps=n_steps,
                        n_walkers=bench.n_walkers,
                        wall_s=float(pd.Series(timings).median()),
                        stored_step_records=estimate.stored_step_records,
                    )
                )
    table = pd.DataFrame(rows)
    os.makedirs(config.run.out, exist_ok=True)
    table.to_csv(os.path.join(config.run.out, "bench.csv"), index=False)
    print(table.to_string(index=False))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalError as error:
        print(f"simfree-soc {args.command}: numerical failure: {error}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError) as error:
        print(f"simfree-soc {args.command}: {error}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as error:
        print(f"simfree-soc {args.command}: {error}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
