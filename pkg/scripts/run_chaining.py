#!/usr/bin/env python3
"""Train one policy per skill, then execute the skills in sequence from each
other's terminal states and report per-stage completion counts."""

import argparse
import time

import torch

from hierbc.backends import BackendBundle
from hierbc.imitation import (
    ChainStage,
    TrainConfig,
    VARIANT_FULL,
    chain_skills,
    generate_demos,
    train,
)
from hierbc.policy import PolicyConfig, TreePolicy
from hierbc.toybench import ToyEnv

DEFAULT_CHAIN = ["place_by_handle", "place_soft_item", "turn_small_knob"]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--tasks", nargs="+", default=DEFAULT_CHAIN)
    ap.add_argument("--variant", default=VARIANT_FULL)
    ap.add_argument("--demos", type=int, default=25)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    policy_config = PolicyConfig(width=64, attention_heads=4,
                                 mlp_hidden=[128, 64], max_tokens=32,
                                 max_objects=12)
    train_config = TrainConfig(batch_size=64, steps=args.steps, lr=1e-3,
                               lr_final=1e-4, eval_every=0)
    bundle = BackendBundle.oracle(dim=policy_config.dim)

    stages = []
    for task in args.tasks:
        t0 = time.time()
        demos = generate_demos(task, args.demos, seed=1000)
        policy = TreePolicy(policy_config, seed=args.seed, dtype=torch.float32)
        train(policy, demos, train_config, bundle=bundle, variant=args.variant,
              seed=args.seed)
        print(f"trained {task} in {time.time() - t0:.0f}s")
        stages.append(ChainStage(policy, task, args.variant))

    completed = chain_skills(stages, args.trials, seed=args.seed, bundle=bundle)
    for stage, count in zip(stages, completed):
        print(f"{stage.template}: {count}/{args.trials}")
    print(f"full chain: {completed[-1]}/{args.trials}")


if __name__ == "__main__":
    main()
