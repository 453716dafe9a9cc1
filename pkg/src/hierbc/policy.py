"""Set-encoder policy: slot tokens + level embeddings + learnable CLS through
self-attention, then an MLP head to continuous actions.

Each slot becomes one token: concat(content, bbox, lost flag) projected per
hierarchy level into the model width, plus a learnable level embedding (all
parts of one object share the object's part embedding). A learnable CLS token
is prepended; the readout either feeds only the CLS output to the MLP
(cls_only) or the concatenation of all output tokens, padded and
attention-masked to a fixed count (concat_all).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .masks import CorruptPayloadError, bbox_to_list
from .tree import EntityTree


class TooManyObjectsError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class GradientMismatchError(AssertionError):
    pass


READOUT_CLS_ONLY = "cls_only"
READOUT_CONCAT_ALL = "concat_all"

# Token kind codes.
K_CLS, K_SCENE, K_OBJ, K_PART, K_EXTRA, K_PAD = 0, 1, 2, 3, 4, 5


@dataclass
class PolicyConfig:
    dim: int = 64                     # slot content dimension D
    attention_layers: int = 2
    attention_heads: int = 4
    width: int = 256                  # model width after input projection
    readout: str = READOUT_CONCAT_ALL
    mlp_hidden: list[int] = field(default_factory=lambda: [512, 256, 128])
    action_dim: int = 4
    max_tokens: int = 32              # includes the CLS token
    max_objects: int = 8
    extra_view: bool = False

    def __post_init__(self):
        if not self.mlp_hidden:
            raise ValueError("mlp_hidden must be nonempty")
        if self.action_dim <= 0:
            raise ValueError("action_dim must be positive")
        if self.readout not in (READOUT_CLS_ONLY, READOUT_CONCAT_ALL):
            raise ValueError(f"unknown readout {self.readout!r}")


@dataclass
class TokenSequence:
    """One tree flattened to token arrays; index 0 is the CLS placeholder."""

    features: np.ndarray   # (T, D+5) float64; zeros at CLS
    kinds: np.ndarray      # (T,) int64
    object_index: np.ndarray  # (T,) int64; 0 where not applicable

    def __len__(self) -> int:
        return len(self.kinds)


def _slot_features(slot, dim: int) -> np.ndarray:
    return np.concatenate([
        np.asarray(slot.content, dtype=np.float64),
        np.asarray(bbox_to_list(slot.location), dtype=np.float64),
        [1.0 if slot.lost else 0.0],
    ])


def tokenize_tree(tree: EntityTree, config: PolicyConfig,
                  extra_view_summary: Optional[np.ndarray] = None) -> TokenSequence:
    """Token order: CLS, scene, obj_0, parts of obj_0, obj_1, ... [, extra view]."""
    if len(tree.objects) > config.max_objects:
        raise TooManyObjectsError(
            f"{len(tree.objects)} objects exceeds max_objects={config.max_objects}"
        )
    dim = config.dim
    feats = [np.zeros(dim + 5)]
    kinds = [K_CLS]
    obj_idx = [0]

    feats.append(_slot_features(tree.scene, dim))
    kinds.append(K_SCENE)
    obj_idx.append(0)

    for i, (oid, slot) in enumerate(zip(tree.object_ids, tree.objects)):
        feats.append(_slot_features(slot, dim))
        kinds.append(K_OBJ)
        obj_idx.append(i)
        for _, pslot in tree.parts.get(oid, []):
            feats.append(_slot_features(pslot, dim))
            kinds.append(K_PART)
            obj_idx.append(i)

    if config.extra_view and extra_view_summary is not None:
        feats.append(np.concatenate([
            np.asarray(extra_view_summary, dtype=np.float64),
            np.zeros(4), [0.0],
        ]))
        kinds.append(K_EXTRA)
        obj_idx.append(0)

    seq = TokenSequence(
        features=np.stack(feats),
        kinds=np.array(kinds, dtype=np.int64),
        object_index=np.array(obj_idx, dtype=np.int64),
    )
    if len(seq) > config.max_tokens:
        raise TooManyObjectsError(
            f"{len(seq)} tokens exceeds max_tokens={config.max_tokens}"
        )
    return seq


def pad_token_batch(sequences: list[TokenSequence], config: PolicyConfig,
                    dtype=torch.float64, device=None):
    """Stack variable-length token sequences into padded tensors plus a pad mask."""
    b, t = len(sequences), config.max_tokens
    feats = torch.zeros((b, t, config.dim + 5), dtype=dtype, device=device)
    kinds = torch.full((b, t), K_PAD, dtype=torch.int64, device=device)
    obj_idx = torch.zeros((b, t), dtype=torch.int64, device=device)
    for i, seq in enumerate(sequences):
        n = len(seq)
        feats[i, :n] = torch.as_tensor(seq.features, dtype=dtype)
        kinds[i, :n] = torch.as_tensor(seq.kinds)
        obj_idx[i, :n] = torch.as_tensor(seq.object_index)
    pad_mask = kinds == K_PAD
    return feats, kinds, obj_idx, pad_mask


class TreePolicy(nn.Module):
    """Deterministic regression policy over slot token sequences."""

    def __init__(self, config: PolicyConfig, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config
        self.dtype_ = dtype
        torch.manual_seed(seed)
        w, d_in = config.width, config.dim + 5

        self.proj_scene = nn.Linear(d_in, w)
        self.proj_obj = nn.Linear(d_in, w)
        self.proj_part = nn.Linear(d_in, w)
        self.proj_extra = nn.Linear(d_in, w)

        self.cls_token = nn.Parameter(torch.zeros(w))
        self.phi_scene = nn.Parameter(torch.zeros(w))
        self.phi_obj = nn.Parameter(torch.zeros(config.max_objects, w))
        self.phi_part = nn.Parameter(torch.zeros(config.max_objects, w))
        self.phi_extra = nn.Parameter(torch.zeros(w))
        for p in (self.cls_token, self.phi_scene, self.phi_obj, self.phi_part,
                  self.phi_extra):
            nn.init.normal_(p, std=0.02)

        layer = nn.TransformerEncoderLayer(
            d_model=w, nhead=config.attention_heads, dim_feedforward=2 * w,
            dropout=0.0, batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.attention_layers)

        head_in = w if config.readout == READOUT_CLS_ONLY else config.max_tokens * w
        widths = [head_in] + list(config.mlp_hidden) + [config.action_dim]
        mlp: list[nn.Module] = []
        for a, b in zip(widths[:-1], widths[1:]):
            mlp.append(nn.Linear(a, b))
            mlp.append(nn.ReLU())
        mlp.pop()  # no activation on the action output
        self.head = nn.Sequential(*mlp)

        self.to(dtype)

    def embed_tokens(self, feats, kinds, obj_idx):
        b, t, _ = feats.shape
        w = self.config.width
        emb = torch.zeros((b, t, w), dtype=feats.dtype, device=feats.device)
        for kind, proj, phi in (
            (K_SCENE, self.proj_scene, self.phi_scene),
            (K_EXTRA, self.proj_extra, self.phi_extra),
        ):
            sel = kinds == kind
            if sel.any():
                emb[sel] = proj(feats[sel]) + phi
        for kind, proj, phi in (
            (K_OBJ, self.proj_obj, self.phi_obj),
            (K_PART, self.proj_part, self.phi_part),
        ):
            sel = kinds == kind
            if sel.any():
                emb[sel] = proj(feats[sel]) + phi[obj_idx[sel]]
        sel = kinds == K_CLS
        if sel.any():
            emb[sel] = self.cls_token.to(feats.dtype)
        return emb

    def forward(self, feats, kinds, obj_idx, pad_mask):
        if feats.shape[1] != self.config.max_tokens:
            raise ShapeMismatchError(
                f"expected {self.config.max_tokens} padded tokens, got {feats.shape[1]}"
            )
        emb = self.embed_tokens(feats, kinds, obj_idx)
        out = self.encoder(emb, src_key_padding_mask=pad_mask)
        if self.config.readout == READOUT_CLS_ONLY:
            h = out[:, 0]
        else:
            out = out.masked_fill(pad_mask.unsqueeze(-1), 0.0)
            h = out.reshape(out.shape[0], -1)
        return self.head(h)

    def token_outputs(self, feats, kinds, obj_idx, pad_mask):
        """Post-attention token outputs (padding zeroed); used by equivariance
        checks on the concat_all readout."""
        emb = self.embed_tokens(feats, kinds, obj_idx)
        out = self.encoder(emb, src_key_padding_mask=pad_mask)
        return out.masked_fill(pad_mask.unsqueeze(-1), 0.0)

    @torch.no_grad()
    def act(self, seq: TokenSequence,
            extra_view_summary: Optional[np.ndarray] = None) -> np.ndarray:
        feats, kinds, obj_idx, pad = pad_token_batch([seq], self.config,
                                                     dtype=self.dtype_)
        return self.forward(feats, kinds, obj_idx, pad)[0].cpu().numpy()


# --- gradient checking ----------------------------------------------------------


@dataclass
class GradientCheckReport:
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict[str, float]
    seeds: list[int]


def _random_batch(config: PolicyConfig, rng: np.random.Generator, batch: int = 3):
    seqs = []
    for _ in range(batch):
        n_obj = int(rng.integers(1, 3))
        feats = [np.zeros(config.dim + 5)]
        kinds = [K_CLS]
        obj_idx = [0]
        feats.append(rng.standard_normal(config.dim + 5))
        kinds.append(K_SCENE)
        obj_idx.append(0)
        for i in range(n_obj):
            feats.append(rng.standard_normal(config.dim + 5))
            kinds.append(K_OBJ)
            obj_idx.append(i)
            for _ in range(int(rng.integers(0, 3))):
                feats.append(rng.standard_normal(config.dim + 5))
                kinds.append(K_PART)
                obj_idx.append(i)
        seqs.append(TokenSequence(np.stack(feats)[: config.max_tokens],
                                  np.array(kinds[: config.max_tokens]),
                                  np.array(obj_idx[: config.max_tokens])))
    targets = rng.standard_normal((batch, config.action_dim))
    return seqs, targets


def gradient_check(config: Optional[PolicyConfig] = None, tolerance: float = 1e-4,
                   seeds: int = 5, step: float = 1e-5) -> GradientCheckReport:
    """Compare analytic gradients of the BC loss against central finite
    differences for every trainable parameter, in double precision."""
    if config is None:
        config = PolicyConfig(dim=8, attention_layers=1, attention_heads=2,
                              width=8, mlp_hidden=[8], action_dim=2,
                              max_tokens=8, max_objects=4,
                              readout=READOUT_CLS_ONLY)
    per_param: dict[str, float] = {}
    seed_list = list(range(seeds))
    for seed in seed_list:
        rng = np.random.default_rng(seed)
        policy = TreePolicy(config, seed=seed, dtype=torch.float64)
        seqs, targets = _random_batch(config, rng)
        feats, kinds, obj_idx, pad = pad_token_batch(seqs, config)
        target = torch.as_tensor(targets, dtype=torch.float64)

        def loss_value() -> float:
            with torch.no_grad():
                pred = policy(feats, kinds, obj_idx, pad)
                return float(((pred - target) ** 2).mean())

        policy.zero_grad()
        pred = policy(feats, kinds, obj_idx, pad)
        loss = ((pred - target) ** 2).mean()
        loss.backward()

        for name, p in policy.named_parameters():
            if not p.requires_grad:
                per_param[f"{name}@{seed}"] = 0.0
                continue
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            analytic = grad.detach().clone().reshape(-1)
            flat = p.data.reshape(-1)
            fd = torch.zeros_like(analytic)
            for k in range(flat.numel()):
                orig = flat[k].item()
                h = step * max(1.0, abs(orig))
                flat[k] = orig + h
                up = loss_value()
                flat[k] = orig - h
                down = loss_value()
                flat[k] = orig
                fd[k] = (up - down) / (2 * h)
            denom = torch.clamp(torch.maximum(analytic.abs(), fd.abs()), min=1e-6)
            per_param[f"{name}@{seed}"] = float(((analytic - fd).abs() / denom).max())

    worst = max(per_param, key=per_param.get)
    return GradientCheckReport(
        max_rel_error=per_param[worst],
        worst_parameter=worst,
        per_parameter=per_param,
        seeds=seed_list,
    )


def assert_gradients_match(report: GradientCheckReport, tolerance: float = 1e-4):
    if report.max_rel_error >= tolerance:
        raise GradientMismatchError(
            f"worst parameter {report.worst_parameter}: "
            f"rel error {report.max_rel_error:.3e} >= {tolerance:.1e}"
        )


# --- checkpoint format -----------------------------------------------------------
#
# Named parameter table with shapes and a config echo: magic, version byte,
# config JSON, then (name, shape, little-endian doubles) per parameter.

_CKPT_MAGIC = b"HBCK"
_CKPT_VERSION = 1


def save_checkpoint(policy: TreePolicy) -> bytes:
    cfg = json.dumps(asdict(policy.config), sort_keys=True).encode("utf-8")
    out = [_CKPT_MAGIC, struct.pack("<BI", _CKPT_VERSION, len(cfg)), cfg]
    params = list(policy.state_dict().items())
    out.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes) -> TreePolicy:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptPayloadError("truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != _CKPT_MAGIC:
        raise CorruptPayloadError("bad checkpoint magic")
    version, cfg_len = struct.unpack("<BI", take(5))
    if version != _CKPT_VERSION:
        raise CorruptPayloadError(f"unsupported checkpoint version {version}")
    try:
        cfg = json.loads(take(cfg_len).decode("utf-8"))
        config = PolicyConfig(**cfg)
    except (ValueError, TypeError) as e:
        raise CorruptPayloadError(f"bad checkpoint config: {e}") from e

    (n_params,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        state[name] = torch.as_tensor(arr, dtype=torch.float64)
    if pos != len(data):
        raise CorruptPayloadError("trailing bytes after checkpoint payload")

    policy = TreePolicy(config, dtype=torch.float64)
    policy.load_state_dict(state)
    return policy
