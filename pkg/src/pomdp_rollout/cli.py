"""Command-line driver: ``pomdp-bench {train,eval,ablation,verify-bounds,exact}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 bound violation (verify-bounds only).
"""

from __future__ import annotations

import argparse
import csv
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .core.adapters import PipelineProblem, greedy_table, start_states
from .core.bounds import verify_bounds
from .core.graph import FeatureGraph, GraphTooLarge, exact_policy_cost, exact_value_iteration
from .mlp import Mlp
from .partition import ENDGAME, SUBSETS, PartitionedPolicy, PartitionedValue
from .pipeline.instance import format_instance, load_instance
from .pipeline.model import InstanceError, PipelineModel
from .trainer import (IterationFailed, IterationReport, PapiConfig, SubsetUnreachable, eval_states,
                      evaluate_policy, fit_value_nets, paired_difference, rollout_policy, stream,
                      train_papi)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_BOUNDS = 0, 2, 3, 4
ALGOS = ("greedy", "rollout-NT", "rollout-T", "pAPI-NT", "pAPI-T", "exact")
EXACT_MAX_NODES = 10_000
NOISE_SEED_KEY = 50


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers


def _prepare_out(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"--out {out} exists and is not empty; refusing to overwrite a previous run")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, model: PipelineModel) -> None:
    lines = [f"command={args.command}", f"version={__version__}", f"config={args.config}"]
    for key in ("algo", "iters", "seed", "samples", "eval_states", "traj_per_state", "workers",
                "checkpoint", "value_checkpoint"):
        if hasattr(args, key):
            lines.append(f"{key}={getattr(args, key)}")
    lines += [f"python={platform.python_version()}", f"numpy={np.__version__}",
              f"scipy={scipy.__version__}"]
    lines += [f"instance.{line}" for line in format_instance(model).splitlines() if line]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def save_checkpoints(out: Path, iteration: int, policy: PartitionedPolicy,
                     value: PartitionedValue | None) -> None:
    """``out/iter-k/subset-n/{policy,value}.ckpt`` plus ``value.scale``."""
    for s in SUBSETS:
        d = out / f"iter-{iteration}" / f"subset-{s}"
        if s in policy.local or (value is not None and s in value.local):
            d.mkdir(parents=True, exist_ok=True)
        if s in policy.local:
            policy.local[s].save(d / "policy.ckpt")
        if value is not None and s in value.local:
            value.local[s].save(d / "value.ckpt")
            (d / "value.scale").write_text(repr(float(value.scales[s])) + "\n")


def load_checkpoints(model: PipelineModel, root: Path):
    """Inverse of ``save_checkpoints`` for one ``iter-k`` directory."""
    if not root.is_dir():
        raise ConfigError(f"checkpoint directory {root} not found")
    nets, vnets, scales = {}, {}, {}
    for s in SUBSETS:
        d = root / f"subset-{s}"
        if (d / "policy.ckpt").exists():
            nets[s] = Mlp.load(d / "policy.ckpt")
        if (d / "value.ckpt").exists():
            vnets[s] = Mlp.load(d / "value.ckpt")
            scales[s] = float((d / "value.scale").read_text())
    value = PartitionedValue(model, vnets, scales) if vnets else None
    return PartitionedPolicy(model, nets), value


# ---------------------------------------------------------------------------
# Commands


def _papi_config(args) -> PapiConfig:
    return PapiConfig(samples_per_subset=args.samples, seed=args.seed, workers=args.workers)


def _eval_set(model, args):
    return eval_states(model, args.eval_states, args.seed)


def _report_rows(report: IterationReport, eval_n: int, n_traj: int):
    row = [report.iteration, report.mode, _fmt(report.eval_mean), _fmt(report.eval_stderr), eval_n, n_traj]
    for s in SUBSETS:
        row += [report.sample_counts.get(s, 0), _fmt(report.policy_accuracy.get(s, float("nan"))),
                _fmt(report.policy_losses.get(s, float("nan"))),
                _fmt(report.value_losses.get(s, float("nan")))]
    return row


RESULT_HEADER = ["iteration", "mode", "mean_cost", "stderr", "eval_states", "traj_per_state"] + [
    f"{name}_{s}" for s in SUBSETS for name in ("samples", "policy_acc", "policy_loss", "value_loss")]


def _run_papi(model, args, out: Path, mode: str, evals):
    pc = _papi_config(args)
    rows, timing_rows = [], []
    policy = value = None
    for policy, new_value, report in train_papi(model, mode, pc, args.iters):
        value = new_value if new_value is not None else value
        res = evaluate_policy(model, policy, evals, args.traj_per_state, args.seed, args.workers)
        report.eval_mean, report.eval_stderr = res.mean, res.stderr
        save_checkpoints(out, report.iteration, policy, new_value)
        rows.append(_report_rows(report, len(evals), args.traj_per_state))
        timing_rows += [[report.iteration, k, f"{v:.3f}"] for k, v in sorted(report.timings.items())]
        print(f"iteration {report.iteration} ({mode}): mean {res.mean:.3f} +- {res.stderr:.3f}",
              flush=True)
    _write_csv(out / "results.csv", RESULT_HEADER, rows)
    _write_csv(out / "timings.csv", ["iteration", "phase", "seconds"], timing_rows)
    return policy, value


def _greedy_endgame_value(model, args) -> PartitionedValue:
    nets, scales = fit_value_nets(model, ENDGAME, PartitionedPolicy(model), _papi_config(args))
    return PartitionedValue(model, nets, scales)


def _policy_for(model, args, algo: str):
    """Policy object for ``eval`` given an algorithm name and optional checkpoints."""
    greedy = PartitionedPolicy(model)
    if algo == "greedy":
        return greedy
    if algo in ("pAPI-NT", "pAPI-T"):
        if not args.checkpoint:
            raise ConfigError(f"--algo {algo} in eval needs --checkpoint DIR/iter-k")
        return load_checkpoints(model, Path(args.checkpoint))[0]
    base = greedy
    if args.checkpoint:
        base = load_checkpoints(model, Path(args.checkpoint))[0]
    if algo == "rollout-NT":
        return rollout_policy(model, base)
    if algo == "rollout-T":
        value = None
        if args.value_checkpoint:
            value = load_checkpoints(model, Path(args.value_checkpoint))[1]
        if value is None:
            value = _greedy_endgame_value(model, args)
        return rollout_policy(model, base, value, truncated=True)
    raise ConfigError(f"--algo {algo} is not available for eval")


EVAL_HEADER = ["method", "mean_cost", "stderr", "diff_vs_greedy", "diff_stderr", "eval_states",
               "traj_per_state"]


def _eval_row(name, res, ref, args):
    d, se = paired_difference(res, ref)
    return [name, _fmt(res.mean), _fmt(res.stderr), _fmt(d), _fmt(se), len(res.costs), args.traj_per_state]


def cmd_train(model, args, out: Path) -> int:
    if args.algo == "exact":
        return cmd_exact(model, args, out)
    if args.algo not in ("pAPI-NT", "pAPI-T"):
        raise ConfigError(f"train supports pAPI-NT, pAPI-T and exact, got {args.algo}")
    evals = _eval_set(model, args)
    _run_papi(model, args, out, "NT" if args.algo == "pAPI-NT" else "T", evals)
    return EXIT_OK


def cmd_eval(model, args, out: Path) -> int:
    evals = _eval_set(model, args)
    greedy = evaluate_policy(model, PartitionedPolicy(model), evals, args.traj_per_state, args.seed,
                             args.workers)
    res = greedy if args.algo == "greedy" else evaluate_policy(
        model, _policy_for(model, args, args.algo), evals, args.traj_per_state, args.seed, args.workers)
    _write_csv(out / "results.csv", EVAL_HEADER, [_eval_row(args.algo, res, greedy, args)])
    print(f"{args.algo}: mean {res.mean:.3f} +- {res.stderr:.3f}")
    return EXIT_OK


def cmd_ablation(model, args, out: Path) -> int:
    """Greedy, rollout-NT, rollout-T, pAPI-NT and pAPI-T on one frozen evaluation set."""
    evals = _eval_set(model, args)
    ev = lambda p: evaluate_policy(model, p, evals, args.traj_per_state, args.seed, args.workers)
    greedy = PartitionedPolicy(model)
    results = {"greedy": ev(greedy)}
    results["rollout-NT"] = ev(rollout_policy(model, greedy))
    results["rollout-T"] = ev(rollout_policy(model, greedy, _greedy_endgame_value(model, args),
                                             truncated=True))
    for algo, mode in (("pAPI-NT", "NT"), ("pAPI-T", "T")):
        sub = out / algo
        sub.mkdir()
        policy, _ = _run_papi(model, args, sub, mode, evals)
        results[algo] = ev(policy)
    rows = [_eval_row(name, res, results["greedy"], args) for name, res in results.items()]
    _write_csv(out / "ablation.csv", EVAL_HEADER, rows)
    for name, res in results.items():
        print(f"{name:>10}: {res.mean:10.3f} +- {res.stderr:.3f}")
    return EXIT_OK


def _exact_graph(model: PipelineModel) -> FeatureGraph:
    priors = np.full((model.n_locations, model.levels), 1.0 / model.levels)
    try:
        return FeatureGraph.build(PipelineProblem(model), start_states(model, priors),
                                  max_nodes=EXACT_MAX_NODES)
    except GraphTooLarge as exc:
        raise ConfigError(f"instance too large for exact solving: {exc}") from exc


def _describe(y) -> list[str]:
    return [" ".join(map(str, y.robots)), y.belief.to_csv().replace("\n", ";")]


def cmd_exact(model, args, out: Path) -> int:
    graph = _exact_graph(model)
    J, mu = exact_value_iteration(graph)
    base = greedy_table(graph, model)
    J_mu = exact_policy_cost(graph, base)
    rows = [[i, *_describe(y), _fmt(J[i]), int(mu[i]), _fmt(J_mu[i]), int(base[i])]
            for i, y in enumerate(graph.nodes)]
    _write_csv(out / "exact.csv", ["node", "robots", "belief", "J_star", "mu_star", "J_greedy",
                                   "greedy"], rows)
    print(f"{graph.n_nodes} nodes; max J* {J.max():.6f}; max J_greedy {J_mu.max():.6f}")
    return EXIT_OK


def cmd_verify_bounds(model, args, out: Path) -> int:
    graph = _exact_graph(model)
    base = greedy_table(graph, model)
    J_mu = exact_policy_cost(graph, base)
    live = np.array([not y.is_terminal() for y in graph.nodes])
    rng = stream(args.seed, NOISE_SEED_KEY)
    noise = np.where(live, rng.uniform(-1, 1, graph.n_nodes) * 0.1 * max(J_mu.max(), 1e-12), 0.0)
    terminals = {"zero": np.zeros(graph.n_nodes), "J_mu": J_mu, "J_mu+noise": J_mu + noise}
    rows = verify_bounds(graph, base, terminals, lookaheads=(1, 2), steps=(0, 1, 2, 5), J_mu=J_mu)
    table = [[r.lookahead, r.steps, r.terminal, _fmt(r.a_lhs), _fmt(r.a_rhs), int(r.a_ok),
              _fmt(r.b_lhs), _fmt(r.b_rhs), int(r.b_ok), int(r.improves)] for r in rows]
    _write_csv(out / "bounds.csv", ["lookahead", "steps", "terminal", "a_lhs", "a_rhs", "a_ok",
                                    "b_lhs", "b_rhs", "b_ok", "improves"], table)
    bad = [r for r in rows if not r.ok or (r.terminal == "J_mu" and not r.improves)]
    print(f"{graph.n_nodes} nodes; {len(rows)} grid cells; {len(bad)} violations")
    return EXIT_BOUNDS if bad else EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablation": cmd_ablation,
            "verify-bounds": cmd_verify_bounds, "exact": cmd_exact}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pomdp-bench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=True, help="instance file (key=value lines)")
        c.add_argument("--seed", type=int, required=True, help="master seed (no wall-clock seeding)")
        c.add_argument("--out", required=True, help="new or empty output directory")
        c.add_argument("--workers", type=int, default=1)
        if name in ("train", "eval", "ablation"):
            c.add_argument("--algo", choices=ALGOS, default="pAPI-NT" if name != "eval" else "greedy")
            c.add_argument("--iters", type=int, default=2)
            c.add_argument("--samples", type=int, default=20_000, help="training samples per subset")
            c.add_argument("--eval-states", type=int, default=500)
            c.add_argument("--traj-per-state", type=int, default=1)
        if name == "eval":
            c.add_argument("--checkpoint", help="iter-k directory holding policy checkpoints")
            c.add_argument("--value-checkpoint", help="iter-k directory holding value checkpoints")
    return p


def _validate(args) -> None:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    for key in ("iters", "samples", "eval_states", "traj_per_state"):
        if hasattr(args, key) and getattr(args, key) < 1:
            raise ConfigError(f"--{key.replace('_', '-')} must be >= 1")
    if not Path(args.config).is_file():
        raise ConfigError(f"--config {args.config}: file not found")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _validate(args)
        model = load_instance(args.config)
        out = _prepare_out(args.out)
        _write_manifest(out, args, model)
    except (ConfigError, InstanceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](model, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IterationFailed, SubsetUnreachable, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
