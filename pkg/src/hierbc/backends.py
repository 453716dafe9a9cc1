"""Pluggable perception capabilities and their deterministic oracle implementations.

Five capabilities feed the representation pipeline: patch feature encoding,
text-grounded segmentation, exhaustive segmentation, mask tracking, and entity
naming. Each has an oracle implementation driven by the synthetic benchmark's
ground-truth masks, plus an adapter wire contract (JSON schema + recorded
fixtures) so real foundation models can be swapped in without touching callers.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .masks import mask_area, mask_iou, rle_decode, rle_encode


class BadImageShapeError(ValueError):
    pass


class BackendUnavailableError(RuntimeError):
    pass


class UnknownDescriptionError(KeyError):
    pass


@dataclass(frozen=True)
class FeatureGrid:
    """Dense per-patch features plus a whole-image summary vector."""

    patch_rows: int
    patch_cols: int
    dim: int
    patch_features: np.ndarray  # (patch_rows, patch_cols, dim)
    global_summary: np.ndarray  # (dim,)


@dataclass(frozen=True)
class GroundingResult:
    query_name: str
    masks: list[np.ndarray]
    scores: list[float]


@dataclass(frozen=True)
class OracleEntityMasks:
    """Ground-truth visible masks for one entity and its parts."""

    name: str
    mask: np.ndarray
    parts: dict[str, np.ndarray]


@dataclass(frozen=True)
class Observation:
    """One frame: the rendered image plus optional ground-truth masks.

    Oracle backends read the ground truth; adapter backends see only pixels.
    """

    image: np.ndarray  # (H, W, 3) uint8
    entities: Optional[list[OracleEntityMasks]] = None
    frame_index: int = 0


# --- patch feature encoder ---------------------------------------------------

N_PATCH_STATS = 13  # mean RGB (3) + color-octant histogram (8) + centroid (2)


class OracleEncoder:
    """Fixed random linear map of per-patch pixel statistics.

    Strictly local: each patch feature depends only on that patch's pixels.
    The global summary is the mean of all patch features.
    """

    def __init__(self, dim: int = 64, patch_size: int = 16, seed: int = 0):
        self.dim = dim
        self.patch_size = patch_size
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((dim, N_PATCH_STATS)) / np.sqrt(N_PATCH_STATS)

    def _patch_stats(self, image: np.ndarray) -> np.ndarray:
        p = self.patch_size
        h, w, _ = image.shape
        pr, pc = h // p, w // p
        img = image.astype(np.float64) / 255.0
        patches = img.reshape(pr, p, pc, p, 3)

        mean_rgb = patches.mean(axis=(1, 3))

        octant = (
            (img[..., 0] > 0.5).astype(np.int64) * 4
            + (img[..., 1] > 0.5).astype(np.int64) * 2
            + (img[..., 2] > 0.5).astype(np.int64)
        )
        onehot = (octant[..., None] == np.arange(8)).astype(np.float64)
        hist = onehot.reshape(pr, p, pc, p, 8).mean(axis=(1, 3))

        lum = img.mean(axis=-1).reshape(pr, p, pc, p)
        coords = (np.arange(p) + 0.5) / p
        wsum = lum.sum(axis=(1, 3))
        cy = (lum * coords[None, :, None, None]).sum(axis=(1, 3))
        cx = (lum * coords[None, None, None, :]).sum(axis=(1, 3))
        safe = np.where(wsum > 0, wsum, 1.0)
        cy = np.where(wsum > 0, cy / safe, 0.5)
        cx = np.where(wsum > 0, cx / safe, 0.5)

        return np.concatenate(
            [mean_rgb, hist, cy[..., None], cx[..., None]], axis=-1
        )

    def encode(self, image: np.ndarray) -> FeatureGrid:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise BadImageShapeError(f"expected (H, W, 3) image, got {image.shape}")
        h, w, _ = image.shape
        if h % self.patch_size or w % self.patch_size:
            raise BadImageShapeError(
                f"image {h}x{w} not divisible by patch size {self.patch_size}"
            )
        stats = self._patch_stats(image)
        features = stats @ self.weights.T
        return FeatureGrid(
            patch_rows=h // self.patch_size,
            patch_cols=w // self.patch_size,
            dim=self.dim,
            patch_features=features,
            global_summary=features.mean(axis=(0, 1)),
        )


# --- oracle segmentation / grounding / tracking ------------------------------


def _require_oracle(obs: Observation) -> list[OracleEntityMasks]:
    if obs.entities is None:
        raise BackendUnavailableError("observation carries no oracle masks")
    return obs.entities


class OracleGrounder:
    """Grounds entity names against the frame's ground-truth masks."""

    def ground(self, obs: Observation, entity_names: list[str]) -> list[GroundingResult]:
        if not entity_names:
            raise ValueError("entity_names must be nonempty")
        entities = _require_oracle(obs)
        by_name = {e.name: e for e in entities}
        results = []
        for name in entity_names:
            ent = by_name.get(name)
            if ent is not None and mask_area(ent.mask) > 0:
                results.append(GroundingResult(name, [ent.mask], [1.0]))
            else:
                results.append(GroundingResult(name, [], []))
        return results


class OracleSegmenter:
    """Proposes every visible entity mask and every visible part mask."""

    def propose_all(self, obs: Observation) -> list[np.ndarray]:
        proposals = []
        for ent in _require_oracle(obs):
            if mask_area(ent.mask) > 0:
                proposals.append(ent.mask)
            for pm in ent.parts.values():
                if mask_area(pm) > 0:
                    proposals.append(pm)
        return proposals


class OracleTracker:
    """Propagates masks by greedy highest-IoU match against the new frame's
    ground-truth masks. A mask whose best candidate overlaps no better than
    min_iou is lost (empty), mirroring occlusion-induced tracking loss."""

    def __init__(self, min_iou: float = 0.2):
        self.min_iou = min_iou

    def track(self, prev_masks: list[np.ndarray], obs: Observation) -> list[np.ndarray]:
        candidates = OracleSegmenter().propose_all(obs)
        out = []
        for prev in prev_masks:
            if mask_area(prev) == 0:
                out.append(np.zeros_like(prev))
                continue
            best_iou = self.min_iou
            best = None
            for cand in candidates:
                iou = mask_iou(prev, cand)
                if iou > best_iou:
                    best_iou = iou
                    best = cand
            out.append(best if best is not None else np.zeros_like(prev))
        return out


# --- entity naming ------------------------------------------------------------

# Nouns the rule-based namer recognizes, in matching priority = word order.
DEFAULT_NOUN_VOCABULARY = (
    "gripper",
    "eggplant",
    "pot",
    "sink",
    "kettle",
    "stove",
    "faucet",
    "knob",
    "microwave",
    "cabinet",
    "light",
    "banana",
    "cup",
)


class RuleBasedNamer:
    """Extracts known nouns from a task description, preserving word order."""

    def __init__(self, vocabulary: tuple[str, ...] = DEFAULT_NOUN_VOCABULARY):
        self.vocabulary = set(vocabulary)

    def name_entities(self, description: str) -> list[str]:
        if not description:
            raise ValueError("description must be nonempty")
        names = []
        for token in description.lower().replace(",", " ").split():
            word = token.strip(".?!\"'")
            if word in self.vocabulary and word not in names:
                names.append(word)
        return names


class FixtureNamer:
    """Replays recorded name lists keyed by the exact description string."""

    def __init__(self, recorded: dict[str, list[str]]):
        self.recorded = dict(recorded)

    def name_entities(self, description: str) -> list[str]:
        if not description:
            raise ValueError("description must be nonempty")
        if description not in self.recorded:
            raise UnknownDescriptionError(description)
        return list(self.recorded[description])

    @classmethod
    def from_file(cls, path: str) -> "FixtureNamer":
        with open(path) as f:
            return cls(json.load(f))


# --- adapter wire contract -----------------------------------------------------
#
# Adapters exchange JSON: request {"op", "image", "payload"}, response
# {"masks": [RLE...], "scores": [...], "features": {"b64", "shape"}} plus
# op-specific fields ("names" for name_entities). Fixtures are stored as
# content-addressed files keyed by the request hash, which keeps every test
# network-free.


def encode_image_png(image: np.ndarray) -> dict:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return {"png_b64": base64.b64encode(buf.getvalue()).decode("ascii")}


def decode_image_png(payload: dict) -> np.ndarray:
    from PIL import Image

    raw = base64.b64decode(payload["png_b64"])
    return np.asarray(Image.open(io.BytesIO(raw)).convert("RGB"))


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "b64": base64.b64encode(arr.tobytes()).decode("ascii"),
        "shape": list(arr.shape),
    }


def decode_array(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(payload["shape"]).copy()


def canonical_request_bytes(request: dict) -> bytes:
    return json.dumps(request, sort_keys=True, separators=(",", ":")).encode("utf-8")


def request_hash(request: dict) -> str:
    return hashlib.sha256(canonical_request_bytes(request)).hexdigest()


class FixtureTransport:
    """Serves recorded responses from a directory of <request-hash>.json files."""

    def __init__(self, fixture_dir: Optional[str] = None):
        self.fixture_dir = fixture_dir or os.environ.get("HIERBC_FIXTURE_DIR")
        if not self.fixture_dir:
            raise BackendUnavailableError(
                "no fixture directory (pass one or set HIERBC_FIXTURE_DIR)"
            )

    def __call__(self, request: dict) -> dict:
        path = os.path.join(self.fixture_dir, request_hash(request) + ".json")
        if not os.path.exists(path):
            raise BackendUnavailableError(f"no recorded fixture for request at {path}")
        with open(path) as f:
            return json.load(f)

    def record(self, request: dict, response: dict) -> str:
        os.makedirs(self.fixture_dir, exist_ok=True)
        path = os.path.join(self.fixture_dir, request_hash(request) + ".json")
        with open(path, "w") as f:
            json.dump(response, f, sort_keys=True)
        return path


class AdapterBackend:
    """All five capabilities over a request/response transport.

    The transport is any callable(request_dict) -> response_dict: a recorded
    fixture store, an HTTP client, or a subprocess bridge.
    """

    def __init__(self, transport: Callable[[dict], dict], dim: int = 768,
                 patch_size: int = 16, feature_layer: int = -1):
        self.transport = transport
        self.dim = dim
        self.patch_size = patch_size
        # Which backbone layer feeds pooled features; default = final layer.
        self.feature_layer = feature_layer

    def _call(self, op: str, image: Optional[np.ndarray], payload: dict) -> dict:
        request = {"op": op, "payload": payload}
        if image is not None:
            request["image"] = encode_image_png(image)
        return self.transport(request)

    def encode(self, image: np.ndarray) -> FeatureGrid:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise BadImageShapeError(f"expected (H, W, 3) image, got {image.shape}")
        resp = self._call("encode", image, {"layer": self.feature_layer})
        features = decode_array(resp["features"])
        summary = decode_array(resp["global_summary"])
        pr, pc, dim = features.shape
        return FeatureGrid(pr, pc, dim, features, summary)

    def ground(self, obs: Observation, entity_names: list[str]) -> list[GroundingResult]:
        if not entity_names:
            raise ValueError("entity_names must be nonempty")
        resp = self._call("ground", obs.image, {"entity_names": list(entity_names)})
        results = []
        for name, group in zip(entity_names, resp["results"]):
            masks = [rle_decode(m) for m in group["masks"]]
            results.append(GroundingResult(name, masks, [float(s) for s in group["scores"]]))
        return results

    def propose_all(self, obs: Observation) -> list[np.ndarray]:
        resp = self._call("propose_all", obs.image, {})
        return [rle_decode(m) for m in resp["masks"]]

    def track(self, prev_masks: list[np.ndarray], obs: Observation) -> list[np.ndarray]:
        payload = {"prev_masks": [rle_encode(m) for m in prev_masks]}
        resp = self._call("track", obs.image, payload)
        out = [rle_decode(m) for m in resp["masks"]]
        if len(out) != len(prev_masks):
            raise BackendUnavailableError(
                f"tracker returned {len(out)} masks for {len(prev_masks)} inputs"
            )
        return out

    def name_entities(self, description: str) -> list[str]:
        if not description:
            raise ValueError("description must be nonempty")
        resp = self._call("name_entities", None, {"description": description})
        return [str(n) for n in resp["names"]]


@dataclass
class BackendBundle:
    """The full perception stack handed to the representation pipeline."""

    encoder: object
    grounder: object
    segmenter: object
    tracker: object
    namer: object

    @classmethod
    def oracle(cls, dim: int = 64, patch_size: int = 16, seed: int = 0,
               namer: Optional[object] = None) -> "BackendBundle":
        return cls(
            encoder=OracleEncoder(dim=dim, patch_size=patch_size, seed=seed),
            grounder=OracleGrounder(),
            segmenter=OracleSegmenter(),
            tracker=OracleTracker(),
            namer=namer or RuleBasedNamer(),
        )
