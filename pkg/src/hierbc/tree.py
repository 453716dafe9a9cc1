"""Three-level scene representation: scene slot, task-relevant object slots,
and per-object part slot sets, advanced through an episode by mask tracking.

Object order is established on frame 0 and held fixed for the whole episode;
entities whose track is lost keep their token position via a sentinel slot
(zero box, zero content, lost flag) so the policy's token layout stays stable.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import FeatureGrid, Observation
from .masks import (
    BBox,
    CorruptPayloadError,
    FULL_IMAGE_BOX,
    LOST_BOX,
    assign_parts,
    mask_area,
    mask_iou,
    tight_bbox,
)


class ShapeMismatchError(ValueError):
    pass


@dataclass
class Slot:
    location: BBox
    content: np.ndarray
    lost: bool = False


@dataclass
class EntityTree:
    scene: Slot
    object_ids: list[str]
    objects: list[Slot]
    # object id -> ordered list of (part id, slot); set-valued semantically,
    # the list order only fixes serialization.
    parts: dict[str, list[tuple[str, Slot]]]
    frame_index: int = 0

    @property
    def token_count(self) -> int:
        return 1 + len(self.objects) + sum(len(v) for v in self.parts.values())


@dataclass
class EpisodeTrack:
    """Mutable per-episode tracking state: stable entity ids -> current masks."""

    object_ids: list[str]
    object_names: list[str]
    part_ids: list[str]
    part_parent: dict[str, str]
    masks: dict[str, np.ndarray]
    mask_shape: tuple[int, int]
    task: Optional[object] = None
    refresh_interval: int = 0
    frame_index: int = 0

    @property
    def ordered_ids(self) -> list[str]:
        return list(self.object_ids) + list(self.part_ids)


def pool_features(grid: FeatureGrid, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Unweighted mean of patch features whose patch contains >= 1 mask pixel.

    Returns (vector, degenerate); a mask touching no patch pools to the zero
    vector with degenerate=True.
    """
    h, w = mask.shape
    if h % grid.patch_rows or w % grid.patch_cols:
        raise ShapeMismatchError(
            f"mask {h}x{w} does not tile patch grid {grid.patch_rows}x{grid.patch_cols}"
        )
    kh, kw = h // grid.patch_rows, w // grid.patch_cols
    touched = mask.reshape(grid.patch_rows, kh, grid.patch_cols, kw).any(axis=(1, 3))
    if not touched.any():
        return np.zeros(grid.dim, dtype=grid.patch_features.dtype), True
    return grid.patch_features[touched].mean(axis=0), False


LOST_SLOT_FLAG = True


def _slot_from_mask(grid: FeatureGrid, mask: np.ndarray) -> Slot:
    if mask_area(mask) == 0:
        return Slot(LOST_BOX, np.zeros(grid.dim), lost=True)
    content, degenerate = pool_features(grid, mask)
    return Slot(tight_bbox(mask), content, lost=degenerate)


def build_tree(
    obs: Observation,
    task_masks: list[np.ndarray],
    encoder,
    segmenter,
    task: Optional[object] = None,
    entity_names: Optional[list[str]] = None,
    part_threshold: float = 0.5,
    duplicate_part_iou: float = 0.95,
    refresh_interval: int = 0,
) -> tuple[EntityTree, EpisodeTrack]:
    """Construct the frame-0 representation and initialize episode tracking.

    One object slot per nonempty task mask, in the given order. Parts come
    from the exhaustive segmenter, assigned to the object containing most of
    them; a part nearly identical to its parent (IoU >= duplicate_part_iou)
    is dropped as a duplicate token. If every task mask is empty, the tree
    degenerates to the scene slot alone (the policy still gets scene-level
    information).
    """
    grid = encoder.encode(obs.image)
    scene = Slot(FULL_IMAGE_BOX, grid.global_summary.copy())

    if entity_names is None:
        entity_names = getattr(task, "entity_names", None) or [
            f"entity{i}" for i in range(len(task_masks))
        ]

    object_ids: list[str] = []
    object_names: list[str] = []
    object_masks: list[np.ndarray] = []
    objects: list[Slot] = []
    for i, mask in enumerate(task_masks):
        if mask_area(mask) == 0:
            continue
        oid = f"obj{i}"
        object_ids.append(oid)
        object_names.append(entity_names[i] if i < len(entity_names) else f"entity{i}")
        object_masks.append(mask)
        objects.append(_slot_from_mask(grid, mask))

    if task_masks and not objects:
        warnings.warn("all task masks empty; building scene-only tree", stacklevel=2)

    parts: dict[str, list[tuple[str, Slot]]] = {oid: [] for oid in object_ids}
    part_ids: list[str] = []
    part_parent: dict[str, str] = {}
    part_masks: dict[str, np.ndarray] = {}
    if object_masks:
        proposals = [m for m in segmenter.propose_all(obs) if mask_area(m) > 0]
        assignment = assign_parts(proposals, object_masks, threshold=part_threshold)
        counters = {oid: 0 for oid in object_ids}
        for j, i in assignment.items():
            oid = object_ids[i]
            if mask_iou(proposals[j], object_masks[i]) >= duplicate_part_iou:
                continue
            pid = f"{oid}.p{counters[oid]}"
            counters[oid] += 1
            parts[oid].append((pid, _slot_from_mask(grid, proposals[j])))
            part_ids.append(pid)
            part_parent[pid] = oid
            part_masks[pid] = proposals[j]

    mask_shape = obs.image.shape[:2]
    masks = {oid: m for oid, m in zip(object_ids, object_masks)}
    masks.update(part_masks)
    track = EpisodeTrack(
        object_ids=object_ids,
        object_names=object_names,
        part_ids=part_ids,
        part_parent=part_parent,
        masks=masks,
        mask_shape=mask_shape,
        task=task,
        refresh_interval=refresh_interval,
        frame_index=obs.frame_index,
    )
    tree = EntityTree(scene, object_ids, objects, parts, frame_index=obs.frame_index)
    return tree, track


def tree_from_track(track: EpisodeTrack, grid: FeatureGrid, frame_index: int) -> EntityTree:
    scene = Slot(FULL_IMAGE_BOX, grid.global_summary.copy())
    objects = [_slot_from_mask(grid, track.masks[oid]) for oid in track.object_ids]
    parts: dict[str, list[tuple[str, Slot]]] = {oid: [] for oid in track.object_ids}
    for pid in track.part_ids:
        parts[track.part_parent[pid]].append((pid, _slot_from_mask(grid, track.masks[pid])))
    return EntityTree(scene, list(track.object_ids), objects, parts, frame_index)


def advance_tree(track: EpisodeTrack, obs: Observation, encoder, tracker) -> EntityTree:
    """Propagate every tracked mask to the new frame and rebuild slots.

    One aligned tracker call covers objects and parts; lost entities become
    sentinel slots while keeping their position in the layout.
    """
    ids = track.ordered_ids
    if ids:
        prev = [track.masks[i] for i in ids]
        new = tracker.track(prev, obs)
        for i, mask in zip(ids, new):
            track.masks[i] = mask
    track.frame_index = obs.frame_index
    grid = encoder.encode(obs.image)
    return tree_from_track(track, grid, obs.frame_index)


def refresh_keyframe(track: EpisodeTrack, obs: Observation, task, backends) -> EpisodeTrack:
    """Re-ground task entities and repair lost or drifted object tracks.

    An object's mask is replaced when its track is empty or disagrees with the
    fresh grounding (IoU < 0.5). Ids are preserved; parts stay tracked as-is.
    """
    from .task import select_task_masks

    fresh = select_task_masks(obs, task, backends.grounder)
    name_to_mask = {name: m for name, m in zip(task.entity_names, fresh)}
    for oid, name in zip(track.object_ids, track.object_names):
        new_mask = name_to_mask.get(name)
        if new_mask is None or mask_area(new_mask) == 0:
            continue
        current = track.masks[oid]
        if mask_area(current) == 0 or mask_iou(current, new_mask) < 0.5:
            track.masks[oid] = new_mask
    return track


# --- serialization ------------------------------------------------------------
#
# Tagged record stream: magic, version byte, frame index, embedding dim, then
# one record per slot (tag, id, parent id, bbox as 4 doubles, lost flag,
# content as little-endian doubles).

_TREE_MAGIC = b"HTRE"
_TREE_VERSION = 1
_TAG_SCENE, _TAG_OBJECT, _TAG_PART = 0, 1, 2


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_record(tag: int, slot_id: str, parent_id: str, slot: Slot) -> bytes:
    content = np.ascontiguousarray(slot.content, dtype="<f8")
    return (
        struct.pack("<B", tag)
        + _pack_str(slot_id)
        + _pack_str(parent_id)
        + struct.pack("<4d", *slot.location)
        + struct.pack("<B", 1 if slot.lost else 0)
        + content.tobytes()
    )


def serialize_tree(tree: EntityTree) -> bytes:
    dim = len(tree.scene.content)
    out = [
        _TREE_MAGIC,
        struct.pack("<BIIH", _TREE_VERSION, tree.frame_index, dim, len(tree.objects)),
        _pack_record(_TAG_SCENE, "scene", "", tree.scene),
    ]
    for oid, slot in zip(tree.object_ids, tree.objects):
        out.append(_pack_record(_TAG_OBJECT, oid, "scene", slot))
        out.append(struct.pack("<H", len(tree.parts.get(oid, []))))
        for pid, pslot in tree.parts.get(oid, []):
            out.append(_pack_record(_TAG_PART, pid, oid, pslot))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayloadError("truncated tree payload")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def _read_record(r: _Reader, dim: int) -> tuple[int, str, str, Slot]:
    (tag,) = r.unpack("<B")
    slot_id = r.take_str()
    parent_id = r.take_str()
    box = BBox(*r.unpack("<4d"))
    (lost,) = r.unpack("<B")
    content = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
    return tag, slot_id, parent_id, Slot(box, content, lost=bool(lost))


def deserialize_tree(data: bytes) -> EntityTree:
    r = _Reader(data)
    if r.take(4) != _TREE_MAGIC:
        raise CorruptPayloadError("bad tree magic")
    version, frame_index, dim, n_objects = r.unpack("<BIIH")
    if version != _TREE_VERSION:
        raise CorruptPayloadError(f"unsupported tree version {version}")
    tag, _, _, scene = _read_record(r, dim)
    if tag != _TAG_SCENE:
        raise CorruptPayloadError("first record must be the scene slot")
    object_ids, objects = [], []
    parts: dict[str, list[tuple[str, Slot]]] = {}
    for _ in range(n_objects):
        tag, oid, _, slot = _read_record(r, dim)
        if tag != _TAG_OBJECT:
            raise CorruptPayloadError("expected object record")
        object_ids.append(oid)
        objects.append(slot)
        parts[oid] = []
        (n_parts,) = r.unpack("<H")
        for _ in range(n_parts):
            tag, pid, parent, pslot = _read_record(r, dim)
            if tag != _TAG_PART or parent != oid:
                raise CorruptPayloadError("malformed part record")
            parts[oid].append((pid, pslot))
    if r.pos != len(r.data):
        raise CorruptPayloadError("trailing bytes after tree payload")
    return EntityTree(scene, object_ids, objects, parts, frame_index=frame_index)
