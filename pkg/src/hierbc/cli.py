"""Command-line entry points: demo generation, training, evaluation, ablation
sweeps, skill chaining, and plotting.

Every command that reports numbers writes a JSON run manifest plus a
tab-delimited table, so results can be parsed without touching pixels.
Exit codes: 0 success, 2 configuration error, 3 backend error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backends import (
    AdapterBackend,
    BackendBundle,
    BackendUnavailableError,
    FixtureTransport,
)
from .imitation import (
    ChainStage,
    TrainConfig,
    VARIANTS,
    VARIANT_FULL,
    chain_skills,
    config_hash,
    evaluate,
    generate_demos,
    load_dataset,
    run_ablation,
    save_dataset,
    summarize_ablation,
    train,
)
from .policy import PolicyConfig, TreePolicy, load_checkpoint, save_checkpoint
from .task import GrounderFailure, NamerFailure
from .toybench import MODES, TEMPLATES, ToyEnv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3


class ConfigError(ValueError):
    pass


class BackendError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    variant: str
    task: str
    created: float = field(default_factory=time.time)
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        payload["config_hash"] = config_hash(self.config)
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_file(path: str) -> dict:
        with open(path) as f:
            return json.load(f)


def _write_manifest(manifest: RunManifest, out_dir: str, name: str = "manifest.json") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        f.write(manifest.to_json())
    return path


def _write_table(rows: list[dict], columns: list[str], path: str) -> None:
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(str(row.get(c, "")) for c in columns) + "\n")


class _SubprocessTransport:
    """Runs an external adapter command per request: JSON in on stdin,
    JSON out on stdout."""

    def __init__(self, cmd: str):
        self.cmd = cmd

    def __call__(self, request: dict) -> dict:
        proc = subprocess.run(
            self.cmd, shell=True, input=json.dumps(request).encode(),
            capture_output=True,
        )
        if proc.returncode != 0:
            raise BackendError(
                f"adapter command failed ({proc.returncode}): {proc.stderr.decode()[:200]}")
        try:
            return json.loads(proc.stdout.decode())
        except json.JSONDecodeError as e:
            raise BackendError(f"adapter returned invalid JSON: {e}") from e


def make_bundle(args, dim: int) -> BackendBundle:
    backend = getattr(args, "backend", "oracle")
    if backend == "oracle":
        return BackendBundle.oracle(dim=dim)
    if backend == "fixture":
        transport = FixtureTransport(getattr(args, "fixture_dir", None))
        adapter = AdapterBackend(transport, dim=dim)
        return BackendBundle(adapter, adapter, adapter, adapter, adapter)
    if backend == "adapter":
        cmd = getattr(args, "adapter_cmd", None)
        if not cmd:
            raise ConfigError("--backend adapter requires --adapter-cmd")
        adapter = AdapterBackend(_SubprocessTransport(cmd), dim=dim)
        return BackendBundle(adapter, adapter, adapter, adapter, adapter)
    raise ConfigError(f"unknown backend {backend!r}")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad config file {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError("config file must contain a JSON object")
    return payload


def _build_dataclass(cls, overrides: dict):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _configs(args) -> tuple[PolicyConfig, TrainConfig]:
    payload = _load_config_file(getattr(args, "config", None))
    pc = _build_dataclass(PolicyConfig, payload.get("policy", {}))
    tc = _build_dataclass(TrainConfig, payload.get("train", {}))
    for name in ("steps", "lr", "batch_size", "eval_every", "eval_rollouts"):
        value = getattr(args, name, None)
        if value is not None:
            tc = dataclasses.replace(tc, **{name: value})
    return pc, tc


def _check_task(task: str) -> str:
    if task not in TEMPLATES:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TEMPLATES)}")
    return task


# --- commands -----------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    task = _check_task(args.task)
    demos = generate_demos(task, args.demos, args.seed, args.mode)
    manifest = save_dataset(demos, args.out, extra={
        "command": "gen-demos", "requested": args.demos, "base_seed": args.seed,
    })
    print(f"wrote {manifest['n_episodes']} episodes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    pc, tc = _configs(args)
    if args.data:
        demos = load_dataset(args.data)
        task = demos[0].template if demos else args.task
    else:
        task = _check_task(args.task)
        demos = generate_demos(task, args.demos, args.seed + 1000, args.mode)
    if not demos:
        raise ConfigError("no demonstrations to train on")
    _check_task(task)
    bundle = make_bundle(args, pc.dim)
    env = ToyEnv(task)
    policy = TreePolicy(pc, seed=args.seed, dtype=torch.float32)
    result = train(policy, demos, tc, bundle=bundle, variant=args.variant,
                   env=env if tc.eval_every > 0 else None, seed=args.seed)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "policy.ckpt")
    with open(ckpt_path, "wb") as f:
        f.write(save_checkpoint(policy))
    manifest = RunManifest(
        command="train",
        config={"policy": dataclasses.asdict(pc), "train": dataclasses.asdict(tc)},
        seeds=[args.seed], variant=args.variant, task=task,
        rows=[{"step": s, "loss": v} for s, v in result.losses]
        + [{"step": s, "success": v} for s, v in result.curve],
    )
    _write_manifest(manifest, args.out)
    print(f"checkpoint: {ckpt_path}")
    if result.curve:
        print(f"best success {result.best_success} at step {result.best_step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.checkpoint, "rb") as f:
        policy = load_checkpoint(f.read())
    task = _check_task(args.task)
    bundle = make_bundle(args, policy.config.dim)
    env = ToyEnv(task)
    frac = evaluate(policy, env, args.rollouts, args.seed, bundle=bundle,
                    variant=args.variant, mode=args.mode)
    n_success = round(frac * args.rollouts)
    row = {"task": task, "mode": args.mode, "variant": args.variant,
           "n_success": n_success, "n_trials": args.rollouts, "fraction": frac}
    print(json.dumps(row))
    if args.out:
        manifest = RunManifest("eval", {"rollouts": args.rollouts, "mode": args.mode},
                               [args.seed], args.variant, task, rows=[row])
        _write_manifest(manifest, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    pc, tc = _configs(args)
    task = _check_task(args.task)
    seeds = tuple(args.seeds)
    tc = dataclasses.replace(tc, seeds=seeds, eval_mode=args.mode)
    if tc.eval_every <= 0:
        tc = dataclasses.replace(tc, eval_every=max(1, tc.steps // 3))
    bundle = make_bundle(args, pc.dim)
    rows = run_ablation(task, tuple(args.variants), tuple(args.demo_counts),
                        tc, pc, bundle=bundle, demo_seed=args.seed + 1000)
    summary = summarize_ablation(rows)
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(
        command="ablate",
        config={"policy": dataclasses.asdict(pc), "train": dataclasses.asdict(tc),
                "demo_counts": list(args.demo_counts)},
        seeds=list(seeds), variant=",".join(args.variants), task=task,
        rows=[{k: row[k] for k in
               ("variant", "demos", "seed", "best_success", "best_step", "eval_mode")}
              for row in rows],
    )
    _write_manifest(manifest, args.out)
    table = [{"variant": v, "demos": d, **stats} for (v, d), stats in
             sorted(summary.items())]
    _write_table(table, ["variant", "demos", "mean", "stderr", "n"],
                 os.path.join(args.out, "summary.tsv"))
    for row in table:
        print(f"{row['variant']}\t{row['demos']}\t"
              f"{row['mean']:.3f} +/- {row['stderr']:.3f} (n={row['n']})")
    return EXIT_OK


def cmd_chain(args) -> int:
    if len(args.checkpoints) != len(args.tasks):
        raise ConfigError("need one checkpoint per task")
    if len(args.checkpoints) < 2:
        raise ConfigError("chaining needs at least two stages")
    stages = []
    for ckpt, task in zip(args.checkpoints, args.tasks):
        with open(ckpt, "rb") as f:
            policy = load_checkpoint(f.read())
        stages.append(ChainStage(policy, _check_task(task), args.variant))
    bundle = make_bundle(args, stages[0].policy.config.dim)
    completed = chain_skills(stages, args.trials, seed=args.seed, bundle=bundle)
    rows = [{"stage": i, "task": s.template, "completed": c, "trials": args.trials}
            for i, (s, c) in enumerate(zip(stages, completed))]
    for row in rows:
        print(f"stage {row['stage']} ({row['task']}): "
              f"{row['completed']}/{row['trials']}")
    if args.out:
        manifest = RunManifest("chain", {"trials": args.trials}, [args.seed],
                               args.variant, "+".join(args.tasks), rows=rows)
        _write_manifest(manifest, args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    if not args.manifests:
        raise ConfigError("at least one manifest is required")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[tuple[str, int], list[float]] = {}
    for path in args.manifests:
        payload = RunManifest.from_file(path)
        for row in payload.get("rows", []):
            if "best_success" in row:
                key = (row["variant"], int(row["demos"]))
                groups.setdefault(key, []).append(float(row["best_success"]))
    if not groups:
        raise ConfigError("manifests contain no ablation rows")

    table = []
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = sorted({v for v, _ in groups})
    for variant in variants:
        counts = sorted(d for v, d in groups if v == variant)
        means, errs = [], []
        for d in counts:
            vals = np.asarray(groups[(variant, d)])
            mean = float(vals.mean())
            err = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
            means.append(mean)
            errs.append(err)
            table.append({"variant": variant, "demos": d, "mean": mean,
                          "stderr": err, "n": len(vals)})
        means, errs = np.asarray(means), np.asarray(errs)
        ax.plot(counts, means, marker="o", label=variant)
        if np.any(errs > 0):
            ax.fill_between(counts, means - errs, means + errs, alpha=0.2)
    ax.set_xlabel("demonstrations")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    _write_table(table, ["variant", "demos", "mean", "stderr", "n"],
                 os.path.splitext(args.out)[0] + ".tsv")
    print(f"wrote {args.out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["oracle", "fixture", "adapter"],
                   default="oracle")
    p.add_argument("--fixture-dir", default=None,
                   help="fixture directory (default: $HIERBC_FIXTURE_DIR)")
    p.add_argument("--adapter-cmd", default=None,
                   help="shell command implementing the adapter wire protocol")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierbc")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="record scripted-expert episodes")
    p.add_argument("--task", required=True)
    p.add_argument("--demos", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="ind")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_demos)

    p = sub.add_parser("train", help="behavior-clone a policy")
    p.add_argument("--task", default=None)
    p.add_argument("--data", default=None, help="dataset dir from gen-demos")
    p.add_argument("--demos", type=int, default=25)
    p.add_argument("--variant", choices=VARIANTS, default=VARIANT_FULL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="ind")
    p.add_argument("--config", default=None, help="JSON with policy/train sections")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--eval-rollouts", dest="eval_rollouts", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate of a trained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--rollouts", type=int, default=100)
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--mode", choices=MODES, default="ind")
    p.add_argument("--variant", choices=VARIANTS, default=VARIANT_FULL)
    p.add_argument("--out", default=None)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant x demo-count x seed sweep")
    p.add_argument("--task", required=True)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--demo-counts", dest="demo_counts", nargs="+", type=int,
                   default=[5, 20])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--seed", type=int, default=0, help="demo base seed")
    p.add_argument("--mode", choices=MODES, default="ind")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("chain", help="run trained skills in sequence")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--tasks", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default=VARIANT_FULL)
    p.add_argument("--out", default=None)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("plot", help="success-vs-demos curves with stderr bands")
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, BackendUnavailableError, GrounderFailure,
            NamerFailure) as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
