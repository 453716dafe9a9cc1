"""Exact geometry over binary masks: boxes, overlap ratios, part assignment, IoU.

Masks are plain numpy boolean arrays of shape (H, W). Boxes are normalized
fractions of image size, pinned to the ordering (x_min, x_max, y_min, y_max);
a pixel at column c spans [c/W, (c+1)/W], so a single-pixel mask has nonzero
box extent and the full image is exactly (0, 1, 0, 1).
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np


class EmptyMaskError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class BBox(NamedTuple):
    x_min: float
    x_max: float
    y_min: float
    y_max: float


FULL_IMAGE_BOX = BBox(0.0, 1.0, 0.0, 1.0)
# Sentinel for entities whose track has been lost.
LOST_BOX = BBox(0.0, 0.0, 0.0, 0.0)


def as_mask(bits) -> np.ndarray:
    m = np.asarray(bits, dtype=bool)
    if m.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2D, got shape {m.shape}")
    return m


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")


def tight_bbox(mask: np.ndarray) -> BBox:
    """Minimal axis-aligned box containing every true pixel, in fractions."""
    mask = as_mask(mask)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise EmptyMaskError("tight_bbox of an empty mask")
    h, w = mask.shape
    return BBox(
        x_min=float(xs.min()) / w,
        x_max=float(xs.max() + 1) / w,
        y_min=float(ys.min()) / h,
        y_max=float(ys.max() + 1) / h,
    )


def containment_ratio(part: np.ndarray, obj: np.ndarray) -> float:
    """Fraction of the part's area that lies inside the object."""
    part = as_mask(part)
    obj = as_mask(obj)
    _check_same_shape(part, obj)
    part_area = mask_area(part)
    if part_area == 0:
        raise EmptyMaskError("containment_ratio with empty part mask")
    inter = int(np.count_nonzero(part & obj))
    return inter / part_area


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 0 when both masks are empty."""
    a = as_mask(a)
    b = as_mask(b)
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return inter / union


def assign_parts(
    parts: list[np.ndarray],
    objects: list[np.ndarray],
    threshold: float = 0.5,
) -> dict[int, int]:
    """Map part index -> object index for parts whose containment exceeds threshold.

    Strict inequality at the threshold. When several objects exceed it, the
    highest ratio wins, ties broken by lowest object index. Parts exceeding
    for no object are omitted from the mapping.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    assignment: dict[int, int] = {}
    for j, part in enumerate(parts):
        best_ratio = threshold
        best_obj: Optional[int] = None
        for i, obj in enumerate(objects):
            r = containment_ratio(part, obj)
            if r > best_ratio:
                best_ratio = r
                best_obj = i
        if best_obj is not None:
            assignment[j] = best_obj
    return assignment


# --- serialization ---------------------------------------------------------
#
# Masks serialize as run lengths over the row-major flattened grid, starting
# with a run of zeros (possibly length 0), under a (height, width) header.


class CorruptPayloadError(ValueError):
    pass


def rle_encode(mask: np.ndarray) -> dict:
    mask = as_mask(mask)
    h, w = mask.shape
    flat = mask.reshape(-1)
    runs: list[int] = []
    if flat.size == 0:
        return {"height": h, "width": w, "runs": runs}
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    lengths = np.diff(bounds).tolist()
    if flat[0]:
        runs.append(0)
    runs.extend(int(x) for x in lengths)
    return {"height": h, "width": w, "runs": runs}


def rle_decode(payload: dict) -> np.ndarray:
    try:
        h = int(payload["height"])
        w = int(payload["width"])
        runs = [int(r) for r in payload["runs"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptPayloadError(f"bad RLE payload: {e}") from e
    if any(r < 0 for r in runs):
        raise CorruptPayloadError("negative run length")
    total = sum(runs)
    if total != h * w:
        raise CorruptPayloadError(f"run lengths sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    return flat.reshape(h, w)


def bbox_to_list(box: BBox) -> list[float]:
    return [box.x_min, box.x_max, box.y_min, box.y_max]


def bbox_from_list(values) -> BBox:
    vals = [float(v) for v in values]
    if len(vals) != 4:
        raise CorruptPayloadError(f"bbox needs 4 values, got {len(vals)}")
    return BBox(*vals)
