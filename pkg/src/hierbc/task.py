"""Task conditioning: resolve a natural-language description into an ordered
list of task-relevant entity masks, with manual-box fallbacks for scenes the
grounder cannot handle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import Observation
from .masks import containment_ratio, mask_area


class NamerFailure(RuntimeError):
    pass


class GrounderFailure(RuntimeError):
    pass


@dataclass
class TaskSpec:
    description: str
    entity_names: list[str] = field(default_factory=list)
    # Per-entity pixel boxes (y0, y1, x0, x1), overriding grounding.
    manual_boxes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)
    grounding_threshold: float = 0.3

    def to_config(self) -> dict:
        return {
            "description": self.description,
            "entity_names": list(self.entity_names),
            "manual_boxes": {k: list(v) for k, v in self.manual_boxes.items()},
            "grounding_threshold": self.grounding_threshold,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "TaskSpec":
        return cls(
            description=cfg["description"],
            entity_names=list(cfg.get("entity_names", [])),
            manual_boxes={k: tuple(v) for k, v in cfg.get("manual_boxes", {}).items()},
            grounding_threshold=float(cfg.get("grounding_threshold", 0.3)),
        )


def resolve_entities(spec: TaskSpec, namer) -> list[str]:
    """Fill in spec.entity_names from the namer; idempotent, cached on the spec."""
    if spec.entity_names:
        return spec.entity_names
    if not spec.description:
        raise NamerFailure("empty task description")
    try:
        names = namer.name_entities(spec.description)
    except Exception as e:
        raise NamerFailure(str(e)) from e
    if not names and not spec.manual_boxes:
        raise NamerFailure(f"no entities resolved for {spec.description!r}")
    spec.entity_names = list(names)
    return spec.entity_names


def _box_mask(shape: tuple[int, int], box: tuple[int, int, int, int]) -> np.ndarray:
    y0, y1, x0, x1 = box
    mask = np.zeros(shape, dtype=bool)
    mask[max(y0, 0) : y1, max(x0, 0) : x1] = True
    return mask


def _mask_from_manual_box(obs: Observation, box, segmenter) -> np.ndarray:
    """Pick the segmenter proposal best contained in the annotated box; fall
    back to the filled box itself when nothing fits."""
    shape = obs.image.shape[:2]
    region = _box_mask(shape, box)
    best = None
    best_score = 0.0
    if segmenter is not None:
        try:
            proposals = segmenter.propose_all(obs)
        except Exception:
            proposals = []
        for m in proposals:
            if mask_area(m) == 0:
                continue
            inside = containment_ratio(m, region)
            if inside > 0.8:
                score = inside * mask_area(m)
                if score > best_score:
                    best_score = score
                    best = m
    return best if best is not None else region


def select_task_masks(obs: Observation, spec: TaskSpec, grounder,
                      segmenter=None) -> list[np.ndarray]:
    """Ordered task-relevant masks, one per entity name (positional contract).

    For each entity the highest-scoring grounded mask above the threshold is
    taken; absent entities yield an empty mask rather than an error. Manual
    boxes override grounding per entity.
    """
    if not spec.entity_names:
        raise GrounderFailure("entities not resolved and no manual boxes")
    shape = obs.image.shape[:2]
    empty = np.zeros(shape, dtype=bool)

    grounded_names = [n for n in spec.entity_names if n not in spec.manual_boxes]
    results = {}
    if grounded_names:
        try:
            for res in grounder.ground(obs, grounded_names):
                results[res.query_name] = res
        except Exception as e:
            raise GrounderFailure(str(e)) from e

    out = []
    for name in spec.entity_names:
        if name in spec.manual_boxes:
            out.append(_mask_from_manual_box(obs, spec.manual_boxes[name], segmenter))
            continue
        res = results.get(name)
        best = empty
        best_score = spec.grounding_threshold
        if res is not None:
            for mask, score in zip(res.masks, res.scores):
                if score > best_score:
                    best_score = score
                    best = mask
        out.append(best)
    return out
