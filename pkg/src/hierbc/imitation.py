"""Behavior cloning on slot-tree representations: demo collection, training,
rollout evaluation, ablation variants, and the skill-chaining harness.

Representation trees are precomputed once per frame before optimization; the
ablation variants differ only in which token set reaches the policy, with
data, optimizer, and seeds held identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backends import BackendBundle, Observation, OracleEntityMasks
from .masks import CorruptPayloadError, rle_decode, rle_encode
from .policy import PolicyConfig, TokenSequence, TreePolicy, pad_token_batch, tokenize_tree
from .task import TaskSpec, select_task_masks
from .toybench import ACTION_DIM, ToyEnv
from .tree import advance_tree, build_tree, refresh_keyframe


class EmptyEvaluationError(ValueError):
    pass


VARIANT_FULL = "full"
VARIANT_MINUS_MULTILEVEL = "minus_multilevel"
VARIANT_MINUS_TASKCOND = "minus_taskcond"
VARIANT_FLAT_SCENE = "flat_scene"
VARIANTS = (VARIANT_FULL, VARIANT_MINUS_MULTILEVEL, VARIANT_MINUS_TASKCOND,
            VARIANT_FLAT_SCENE)


class NullSegmenter:
    """Proposes nothing; used by variants that drop the part level."""

    def propose_all(self, obs):
        return []


WRIST_CROP = 48  # side of the gripper-centered crop behind the extra view token


def wrist_view_summary(image: np.ndarray, center_rc: tuple[float, float],
                       encoder, crop: int = WRIST_CROP) -> np.ndarray:
    """Global feature summary of a crop centered on the gripper (clamped to
    the frame); the egocentric analogue of a wrist camera."""
    h, w, _ = image.shape
    half = crop // 2
    r0 = min(max(int(round(center_rc[0])) - half, 0), h - crop)
    c0 = min(max(int(round(center_rc[1])) - half, 0), w - crop)
    return encoder.encode(image[r0:r0 + crop, c0:c0 + crop]).global_summary


class RepresentationPipeline:
    """Builds the frame-0 tree for one episode and advances it per frame,
    honoring the ablation variant and optional keyframe refresh."""

    def __init__(self, bundle: BackendBundle, task: Optional[TaskSpec],
                 variant: str = VARIANT_FULL, refresh_interval: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.bundle = bundle
        self.task = task
        self.variant = variant
        self.refresh_interval = refresh_interval
        self.track = None
        self._spec: Optional[TaskSpec] = None

    def start(self, obs: Observation):
        b = self.bundle
        if self.variant == VARIANT_FLAT_SCENE:
            self._spec = None
            tree, self.track = build_tree(obs, [], b.encoder, NullSegmenter())
            return tree
        if self.variant == VARIANT_MINUS_TASKCOND:
            names = [e.name for e in obs.entities or []]
            spec = TaskSpec(description=self.task.description if self.task else "",
                            entity_names=names)
        else:
            spec = self.task
        self._spec = spec
        masks = select_task_masks(obs, spec, b.grounder, b.segmenter)
        seg = NullSegmenter() if self.variant == VARIANT_MINUS_MULTILEVEL else b.segmenter
        tree, self.track = build_tree(obs, masks, b.encoder, seg, task=spec,
                                      refresh_interval=self.refresh_interval)
        return tree

    def advance(self, obs: Observation):
        if (self.refresh_interval > 0 and self._spec is not None
                and obs.frame_index % self.refresh_interval == 0):
            refresh_keyframe(self.track, obs, self._spec, self.bundle)
        return advance_tree(self.track, obs, self.bundle.encoder, self.bundle.tracker)

    def extra_view(self, obs: Observation) -> np.ndarray:
        """Wrist-view summary centered on the tracked gripper (image center
        when no gripper track is available)."""
        center = (obs.image.shape[0] / 2, obs.image.shape[1] / 2)
        track = self.track
        if track is not None and "gripper" in track.object_names:
            oid = track.object_ids[track.object_names.index("gripper")]
            mask = track.masks.get(oid)
            if mask is not None and mask.any():
                rows, cols = np.nonzero(mask)
                center = (float(rows.mean()), float(cols.mean()))
        return wrist_view_summary(obs.image, center, self.bundle.encoder)


# --- demonstrations -----------------------------------------------------------


@dataclass
class Demonstration:
    observations: list[Observation]   # one per action (frame observed, then acted)
    actions: np.ndarray               # (T, action_dim)
    task: TaskSpec
    template: str
    seed: int
    mode: str = "ind"
    success: bool = True


def generate_demos(template: str, n: int, seed: int, mode: str = "ind",
                   noise: float = 0.15,
                   max_attempts_factor: int = 3) -> list[Demonstration]:
    """Scripted-expert episodes; failed attempts are skipped and replaced.

    With noise > 0 the executed motion is jittered while the recorded label
    stays the expert's clean action, so the dataset covers slightly off-policy
    states with corrective supervision (grip and tilt are never jittered).
    """
    env = ToyEnv(template)
    demos: list[Demonstration] = []
    attempt = 0
    while len(demos) < n and attempt < max(1, n) * max_attempts_factor:
        ep_seed = seed + attempt
        rng = np.random.default_rng([ep_seed, 7])
        attempt += 1
        state, obs = env.reset(ep_seed, mode)
        observations, actions = [], []
        done = False
        success = False
        while not done:
            a = env.scripted_expert(state)
            observations.append(obs)
            actions.append(a)
            executed = a.copy()
            if noise > 0:
                executed[:2] = executed[:2] + noise * rng.standard_normal(2)
            state, obs, success, done = env.step(state, executed)
        if not success:
            continue
        demos.append(Demonstration(
            observations=observations,
            actions=np.asarray(actions, dtype=np.float64),
            task=env.task_spec(),
            template=env.template.name,
            seed=ep_seed,
            mode=mode,
            success=True,
        ))
    return demos


# --- episode serialization ----------------------------------------------------

_EP_MAGIC = b"HEPI"
_EP_VERSION = 1


def _pack_rle(mask: np.ndarray) -> bytes:
    rle = rle_encode(mask)
    runs = rle["runs"]
    return struct.pack("<HHI", rle["height"], rle["width"], len(runs)) + struct.pack(
        f"<{len(runs)}I", *runs
    )


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def serialize_episode(demo: Demonstration) -> bytes:
    header = json.dumps(
        {
            "task": demo.task.to_config(),
            "template": demo.template,
            "seed": demo.seed,
            "mode": demo.mode,
            "success": demo.success,
        },
        sort_keys=True,
    ).encode("utf-8")
    t = len(demo.observations)
    h, w, _ = demo.observations[0].image.shape
    a = demo.actions.shape[1]
    out = [
        _EP_MAGIC,
        struct.pack("<BI", _EP_VERSION, len(header)),
        header,
        struct.pack("<IHHH", t, h, w, a),
    ]
    for obs in demo.observations:
        out.append(np.ascontiguousarray(obs.image, dtype=np.uint8).tobytes())
    out.append(np.ascontiguousarray(demo.actions, dtype="<f8").tobytes())
    for obs in demo.observations:
        entities = obs.entities or []
        out.append(struct.pack("<H", len(entities)))
        for ent in entities:
            out.append(_pack_name(ent.name))
            out.append(_pack_rle(ent.mask))
            out.append(struct.pack("<H", len(ent.parts)))
            for pname, pmask in ent.parts.items():
                out.append(_pack_name(pname))
                out.append(_pack_rle(pmask))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayloadError("truncated episode payload")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def rle(self) -> np.ndarray:
        h, w, n_runs = self.unpack("<HHI")
        runs = list(self.unpack(f"<{n_runs}I")) if n_runs else []
        return rle_decode({"height": h, "width": w, "runs": runs})


def deserialize_episode(data: bytes) -> Demonstration:
    r = _Reader(data)
    if r.take(4) != _EP_MAGIC:
        raise CorruptPayloadError("bad episode magic")
    version, header_len = r.unpack("<BI")
    if version != _EP_VERSION:
        raise CorruptPayloadError(f"unsupported episode version {version}")
    header = json.loads(r.take(header_len).decode("utf-8"))
    t, h, w, a = r.unpack("<IHHH")
    frames = np.frombuffer(r.take(t * h * w * 3), dtype=np.uint8).reshape(t, h, w, 3)
    actions = np.frombuffer(r.take(t * a * 8), dtype="<f8").reshape(t, a).copy()
    observations = []
    for i in range(t):
        (n_entities,) = r.unpack("<H")
        entities = []
        for _ in range(n_entities):
            ename = r.name()
            emask = r.rle()
            (n_parts,) = r.unpack("<H")
            parts = {}
            for _ in range(n_parts):
                pname = r.name()
                parts[pname] = r.rle()
            entities.append(OracleEntityMasks(ename, emask, parts))
        observations.append(Observation(image=frames[i].copy(),
                                        entities=entities or None, frame_index=i))
    if r.pos != len(r.data):
        raise CorruptPayloadError("trailing bytes after episode payload")
    return Demonstration(
        observations=observations,
        actions=actions,
        task=TaskSpec.from_config(header["task"]),
        template=header["template"],
        seed=int(header["seed"]),
        mode=header.get("mode", "ind"),
        success=bool(header.get("success", True)),
    )


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:16]


def save_dataset(demos: list[Demonstration], out_dir: str, extra: Optional[dict] = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, demo in enumerate(demos):
        fname = f"episode_{i:04d}.bin"
        with open(os.path.join(out_dir, fname), "wb") as f:
            f.write(serialize_episode(demo))
        names.append(fname)
    manifest = {
        "template": demos[0].template if demos else None,
        "n_episodes": len(demos),
        "seeds": [d.seed for d in demos],
        "mode": demos[0].mode if demos else None,
        "episodes": names,
    }
    manifest.update(extra or {})
    manifest["config_hash"] = config_hash(manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_dataset(in_dir: str) -> list[Demonstration]:
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    demos = []
    for fname in manifest["episodes"]:
        with open(os.path.join(in_dir, fname), "rb") as f:
            demos.append(deserialize_episode(f.read()))
    return demos


# --- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    demo_count: Optional[int] = None
    batch_size: int = 64
    steps: int = 20000
    lr: float = 1e-4
    eval_every: int = 0               # 0 = no periodic evaluation
    eval_rollouts: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_mode: str = "ind"
    eval_seed_base: int = 10_000      # keeps eval scenes disjoint from demos
    refresh_interval: int = 10
    lr_final: Optional[float] = None  # cosine-anneal to this lr; None = constant
    weight_decay: float = 0.0


@dataclass
class TrainResult:
    losses: list[tuple[int, float]]
    curve: list[tuple[int, float]]    # (step, eval success fraction)
    best_success: float
    best_step: Optional[int]


def bc_loss(policy: TreePolicy, batch) -> torch.Tensor:
    """Mean squared error between predicted and expert actions."""
    feats, kinds, obj_idx, pad, target = batch
    pred = policy(feats, kinds, obj_idx, pad)
    return ((pred - target) ** 2).mean()


def precompute_tokens(
    demos: list[Demonstration],
    policy_config: PolicyConfig,
    bundle: BackendBundle,
    variant: str = VARIANT_FULL,
    refresh_interval: int = 0,
) -> tuple[list[TokenSequence], np.ndarray]:
    """Representation trees for every demo frame, tokenized once up front."""
    sequences: list[TokenSequence] = []
    actions: list[np.ndarray] = []
    for demo in demos:
        pipeline = RepresentationPipeline(bundle, demo.task, variant,
                                          refresh_interval=refresh_interval)
        for t, obs in enumerate(demo.observations):
            tree = pipeline.start(obs) if t == 0 else pipeline.advance(obs)
            extra = (pipeline.extra_view(obs)
                     if policy_config.extra_view else None)
            sequences.append(tokenize_tree(tree, policy_config, extra))
            actions.append(demo.actions[t])
    return sequences, np.asarray(actions, dtype=np.float64)


def best_over_training(curve) -> float:
    """Max snapshot evaluation; ties resolve to the earliest step."""
    values = [v for _, v in curve] if curve and isinstance(curve[0], tuple) else list(curve)
    if not values:
        raise EmptyEvaluationError("empty training curve")
    return max(values)


def train(
    policy: TreePolicy,
    demos: list[Demonstration],
    config: TrainConfig,
    bundle: Optional[BackendBundle] = None,
    variant: str = VARIANT_FULL,
    env: Optional[ToyEnv] = None,
    seed: int = 0,
) -> TrainResult:
    if not demos:
        raise ValueError("need at least one demonstration")
    bundle = bundle or BackendBundle.oracle(dim=policy.config.dim)
    sequences, actions = precompute_tokens(demos, policy.config, bundle, variant)
    feats, kinds, obj_idx, pad = pad_token_batch(sequences, policy.config,
                                                 dtype=policy.dtype_)
    target = torch.as_tensor(actions, dtype=policy.dtype_)
    n = len(sequences)

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.AdamW(policy.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    sched = None
    if config.lr_final is not None:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=config.steps, eta_min=config.lr_final)

    losses: list[tuple[int, float]] = []
    curve: list[tuple[int, float]] = []

    def snapshot(step: int) -> None:
        if env is None or config.eval_rollouts <= 0:
            return
        frac = evaluate(
            policy, env, config.eval_rollouts, config.eval_seed_base,
            bundle=bundle, variant=variant, mode=config.eval_mode,
            refresh_interval=config.refresh_interval,
        )
        curve.append((step, frac))

    for step in range(1, config.steps + 1):
        idx = torch.as_tensor(rng.integers(0, n, size=min(config.batch_size, n)))
        batch = (feats[idx], kinds[idx], obj_idx[idx], pad[idx], target[idx])
        loss = bc_loss(policy, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        if step % 50 == 0 or step == config.steps:
            losses.append((step, float(loss.detach())))
        if config.eval_every > 0 and step % config.eval_every == 0:
            snapshot(step)
    if config.eval_every > 0 and (not curve or curve[-1][0] != config.steps):
        snapshot(config.steps)

    if curve:
        best = best_over_training(curve)
        best_step = min(s for s, v in curve if v == best)
    else:
        best, best_step = 0.0, None
    return TrainResult(losses=losses, curve=curve, best_success=best,
                       best_step=best_step)


# --- evaluation ---------------------------------------------------------------


def rollout(
    policy: TreePolicy,
    env: ToyEnv,
    seed: int,
    mode: str = "ind",
    bundle: Optional[BackendBundle] = None,
    variant: str = VARIANT_FULL,
    refresh_interval: int = 10,
    initial_state=None,
) -> tuple[bool, object]:
    """One closed-loop episode; returns (success, terminal state)."""
    bundle = bundle or BackendBundle.oracle(dim=policy.config.dim)
    if initial_state is None:
        state, obs = env.reset(seed, mode)
    else:
        state = dataclasses.replace(initial_state, step=0)
        obs = env.observe(state)
    task = env.task_spec() if variant != VARIANT_FLAT_SCENE else None
    pipeline = RepresentationPipeline(bundle, task, variant,
                                      refresh_interval=refresh_interval)
    tree = pipeline.start(obs)
    success = False
    done = False
    while not done:
        extra = pipeline.extra_view(obs) if policy.config.extra_view else None
        action = policy.act(tokenize_tree(tree, policy.config, extra))
        state, obs, success, done = env.step(state, action)
        if not done:
            tree = pipeline.advance(obs)
    return success, state


def evaluate(
    policy: TreePolicy,
    env: ToyEnv,
    n_rollouts: int,
    seed: int,
    bundle: Optional[BackendBundle] = None,
    variant: str = VARIANT_FULL,
    mode: str = "ind",
    refresh_interval: int = 10,
) -> float:
    """Success fraction over n_rollouts independent episodes."""
    if n_rollouts <= 0:
        raise EmptyEvaluationError("n_rollouts must be positive")
    bundle = bundle or BackendBundle.oracle(dim=policy.config.dim)
    wins = 0
    for i in range(n_rollouts):
        ok, _ = rollout(policy, env, seed + i, mode, bundle, variant,
                        refresh_interval)
        wins += bool(ok)
    return wins / n_rollouts


# --- ablations ----------------------------------------------------------------


def run_ablation(
    template: str,
    variants: tuple[str, ...],
    demo_counts: tuple[int, ...],
    train_config: TrainConfig,
    policy_config: PolicyConfig,
    bundle: Optional[BackendBundle] = None,
    demo_seed: int = 1000,
    demos: Optional[list[Demonstration]] = None,
    dtype: torch.dtype = torch.float32,
) -> list[dict]:
    """Sweep variant x demo_count x seed with shared data and optimizer.

    Returns one row per cell: variant, demo count, seed, best-over-training
    success and the evaluation curve.
    """
    env = ToyEnv(template)
    bundle = bundle or BackendBundle.oracle(dim=policy_config.dim)
    if demos is None:
        demos = generate_demos(template, max(demo_counts), demo_seed)
    rows = []
    for count in demo_counts:
        subset = demos[:count]
        for variant in variants:
            for seed in train_config.seeds:
                policy = TreePolicy(policy_config, seed=seed, dtype=dtype)
                result = train(policy, subset, train_config, bundle=bundle,
                               variant=variant, env=env, seed=seed)
                rows.append({
                    "template": template,
                    "variant": variant,
                    "demos": count,
                    "seed": seed,
                    "best_success": result.best_success,
                    "best_step": result.best_step,
                    "curve": result.curve,
                    "final_loss": result.losses[-1][1] if result.losses else None,
                    "eval_mode": train_config.eval_mode,
                })
    return rows


def summarize_ablation(rows: list[dict]) -> dict[tuple[str, int], dict]:
    """Mean and standard error of best success per (variant, demo count)."""
    groups: dict[tuple[str, int], list[float]] = {}
    for row in rows:
        groups.setdefault((row["variant"], row["demos"]), []).append(row["best_success"])
    out = {}
    for key, vals in groups.items():
        arr = np.asarray(vals)
        stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        out[key] = {"mean": float(arr.mean()), "stderr": stderr, "n": len(arr)}
    return out


# --- skill chaining -----------------------------------------------------------


@dataclass
class ChainStage:
    policy: TreePolicy
    template: str
    variant: str = VARIANT_FULL


def chain_skills(
    stages: list[ChainStage],
    trials: int,
    seed: int = 0,
    bundle: Optional[BackendBundle] = None,
    refresh_interval: int = 10,
) -> list[int]:
    """Execute independently trained skills in sequence from each other's
    terminal states. Returns, per stage, the number of trials that completed
    it; a stage failure ends the trial."""
    if len(stages) < 2:
        raise ValueError("chaining needs at least two stages")
    completed = [0] * len(stages)
    for t in range(trials):
        first_env = ToyEnv(stages[0].template)
        state, _ = first_env.reset(seed + t, "ind")
        for k, stage in enumerate(stages):
            env = ToyEnv(stage.template)
            ok, state = rollout(stage.policy, env, seed + t, "ind", bundle,
                                stage.variant, refresh_interval,
                                initial_state=state)
            if not ok:
                break
            completed[k] += 1
    return completed
