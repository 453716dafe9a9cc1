"""Deterministic 2D top-down manipulation benchmark.

A 128x128 kitchen-counter scene with composite objects (unions of colored
parts), movable distractors, a point gripper, scripted experts, and exact
oracle segmentation. Five task templates with graded difficulty mirror
pick-place, handle-gated grasping, knob turning, and pouring; each supports
an in-distribution reset plus three scripted out-of-distribution variants
(distractor moved / removed / novel distractor added).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backends import Observation, OracleEntityMasks
from .task import TaskSpec


class UnknownTemplateError(KeyError):
    pass


IMAGE_SIZE = 128
PATCH_SIZE = 16
MAX_STEP = 4.0          # px per action unit
GRASP_RADIUS = 12.0
TURN_RATE = 0.15        # knob angle units per step at full deflection
PLACE_TOL = 12.0        # center distance for a successful placement
POUR_TOL = 11.0
AGENT_BOUNDS = (6.0, 122.0)
MIN_SEPARATION = 26.0
ACTION_DIM = 4          # (dx, dy, grip, tilt)

BACKGROUND = (230, 230, 230)


@dataclass(frozen=True)
class PartSpec:
    name: str
    kind: str                      # "rect" | "circle"
    color: tuple[int, int, int]
    offset: tuple[float, float]    # (dx, dy) from entity center
    size: tuple[float, ...]        # rect: (w, h); circle: (r,)


@dataclass(frozen=True)
class EntitySpec:
    name: str
    parts: tuple[PartSpec, ...]
    movable: bool = False
    graspable_parts: tuple[str, ...] = ()
    placement: tuple[float, float, float, float] = (0, 0, 0, 0)  # x0,x1,y0,y1


def _rect(name, color, w, h, dx=0.0, dy=0.0):
    return PartSpec(name, "rect", color, (dx, dy), (w, h))


def _circle(name, color, r, dx=0.0, dy=0.0):
    return PartSpec(name, "circle", color, (dx, dy), (r,))


# Scene draw order = tuple order (later entities occlude earlier ones);
# the gripper is always topmost.
ENTITY_POOL: tuple[EntitySpec, ...] = (
    EntitySpec("sink", (_rect("basin", (150, 150, 160), 30, 26),),
               placement=(24, 44, 98, 110)),
    EntitySpec("stove", (_rect("top", (90, 30, 30), 24, 24),),
               placement=(84, 104, 98, 110)),
    EntitySpec("pot", (_rect("body", (40, 40, 45), 22, 22),
                       _rect("water", (240, 140, 40), 10, 10)),
               placement=(84, 104, 22, 34)),
    EntitySpec("faucet", (_rect("base", (180, 180, 190), 18, 8),
                          _circle("knob", (30, 60, 200), 5, 0, -10),
                          _rect("indicator", (250, 250, 250), 3, 3)),
               graspable_parts=("knob",),
               placement=(24, 44, 22, 34)),
    EntitySpec("banana", (_rect("body", (230, 210, 40), 16, 8),),
               movable=True, placement=(20, 108, 50, 78)),
    EntitySpec("cup", (_circle("body", (60, 200, 220), 6),),
               movable=True, placement=(20, 108, 50, 78)),
    EntitySpec("kettle", (_circle("body", (70, 110, 180), 9),
                          _rect("handle", (140, 90, 50), 8, 7, 14, 0)),
               movable=True, graspable_parts=("handle",),
               placement=(48, 80, 46, 82)),
    EntitySpec("eggplant", (_circle("body", (120, 40, 140), 8),
                            _rect("stem", (60, 160, 60), 4, 6, 0, -11)),
               movable=True, graspable_parts=("body", "stem"),
               placement=(48, 80, 46, 82)),
    EntitySpec("novelbox", (_rect("body", (250, 120, 10), 16, 16),),
               placement=(40, 88, 40, 88)),
    EntitySpec("occluder", (_rect("body", (70, 70, 70), 36, 36),),
               movable=True, placement=(40, 88, 40, 88)),
)

GRIPPER_SIZE = 10
GRIPPER_OPEN_COLOR = (0, 180, 0)
GRIPPER_CLOSED_COLOR = (220, 0, 0)

_SPEC_BY_NAME = {e.name: e for e in ENTITY_POOL}
_POOL_ORDER = {e.name: i for i, e in enumerate(ENTITY_POOL)}

# Entities present in every in-distribution scene.
BASE_SCENE = ("sink", "stove", "pot", "faucet", "banana", "cup", "kettle", "eggplant")
DISTRACTORS = ("banana", "cup")


@dataclass(frozen=True)
class TaskTemplate:
    name: str
    description: str
    task_entities: tuple[str, ...]   # includes the gripper; ordered
    kind: str                        # "place" | "knob" | "pour"
    target: str                      # manipulated entity
    goal: str = ""                   # goal entity for place/pour
    horizon: int = 80

    def task_spec(self) -> TaskSpec:
        return TaskSpec(description=self.description,
                        entity_names=list(self.task_entities))


TEMPLATES: dict[str, TaskTemplate] = {
    t.name: t
    for t in (
        TaskTemplate("place_soft_item", "put the eggplant in the sink",
                     ("gripper", "eggplant", "sink"), "place", "eggplant", "sink", 80),
        TaskTemplate("place_by_handle", "place the kettle on the stove",
                     ("gripper", "kettle", "stove"), "place", "kettle", "stove", 80),
        TaskTemplate("turn_small_knob", "open the faucet",
                     ("gripper", "faucet"), "knob", "faucet", "", 70),
        TaskTemplate("two_object_place", "put the eggplant in the pot",
                     ("gripper", "eggplant", "pot"), "place", "eggplant", "pot", 80),
        TaskTemplate("pour_two_object", "pour water from the kettle into the pot",
                     ("gripper", "kettle", "pot"), "pour", "kettle", "pot", 90),
    )
}

MODES = ("ind", "ood1", "ood2", "ood3")


@dataclass
class EnvState:
    entities: list[str]
    poses: dict[str, np.ndarray]     # entity name -> (x, y)
    kettle_side: int                 # handle on +x or -x side
    agent: np.ndarray                # (x, y)
    grip_closed: bool = False
    held: Optional[str] = None
    faucet_angle: float = 0.0
    poured: bool = False
    step: int = 0


def _grasp_points(state: EnvState, name: str) -> list[np.ndarray]:
    spec = _SPEC_BY_NAME[name]
    points = []
    for part in spec.parts:
        if part.name not in spec.graspable_parts:
            continue
        off = np.array(part.offset, dtype=float)
        if name == "kettle":
            off = off * np.array([state.kettle_side, 1.0])
        points.append(state.poses[name] + off)
    return points


def _part_center(state: EnvState, name: str, part: PartSpec) -> np.ndarray:
    off = np.array(part.offset, dtype=float)
    if name == "kettle" and part.name == "handle":
        off = off * np.array([state.kettle_side, 1.0])
    if name == "faucet" and part.name == "indicator":
        theta = min(state.faucet_angle, 1.3) * (math.pi / 2)
        knob = np.array([0.0, -10.0])
        off = knob + 8.0 * np.array([math.sin(theta), -math.cos(theta)])
    return state.poses[name] + off


_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


def _raster(kind: str, size: tuple[float, ...], center: np.ndarray) -> np.ndarray:
    cx, cy = float(center[0]), float(center[1])
    if kind == "rect":
        w, h = size
        return (np.abs(_XX - cx) <= w / 2) & (np.abs(_YY - cy) <= h / 2)
    if kind == "circle":
        (r,) = size
        return (_XX - cx) ** 2 + (_YY - cy) ** 2 <= r * r
    raise ValueError(f"unknown part kind {kind}")


class ToyEnv:
    """One task template over the shared kitchen scene. Instances are
    independent and single-threaded; create one per concurrent rollout."""

    def __init__(self, template: str | TaskTemplate):
        if isinstance(template, str):
            if template not in TEMPLATES:
                raise UnknownTemplateError(template)
            template = TEMPLATES[template]
        self.template = template

    # -- reset ------------------------------------------------------------

    def reset(self, seed: int, mode: str = "ind") -> tuple[EnvState, Observation]:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        tpl_idx = sorted(TEMPLATES).index(self.template.name)
        # Mode perturbations are applied after sampling, so every OoD scene
        # shares its seed's in-distribution layout.
        rng = np.random.default_rng([tpl_idx, seed])

        entities = list(BASE_SCENE)
        poses: dict[str, np.ndarray] = {}
        placed: list[np.ndarray] = []

        def sample(name: str) -> np.ndarray:
            x0, x1, y0, y1 = _SPEC_BY_NAME[name].placement
            for _ in range(200):
                p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
                if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in placed):
                    placed.append(p)
                    return p
            placed.append(p)
            return p

        for name in BASE_SCENE:
            poses[name] = sample(name)
        kettle_side = int(rng.choice([-1, 1]))
        agent = np.array([rng.uniform(44, 84), rng.uniform(44, 84)])

        if mode == "ood1":
            poses["banana"] = np.array([16.0, 16.0])
            poses["cup"] = np.array([112.0, 112.0])
        elif mode == "ood2":
            entities.remove("banana")
            poses.pop("banana")
        elif mode == "ood3":
            entities.append("novelbox")
            poses["novelbox"] = sample("novelbox")
        entities.sort(key=_POOL_ORDER.__getitem__)

        state = EnvState(entities=entities, poses=poses, kettle_side=kettle_side,
                         agent=agent)
        return state, self.observe(state)

    # -- rendering and oracle masks ----------------------------------------

    def _visible_parts(self, state: EnvState) -> list[tuple[str, str, tuple, np.ndarray]]:
        items = []
        for name in state.entities:
            spec = _SPEC_BY_NAME[name]
            for part in spec.parts:
                if name == "pot" and part.name == "water" and not state.poured:
                    continue
                center = _part_center(state, name, part)
                items.append((name, part.name, part.color,
                              _raster(part.kind, part.size, center)))
        color = GRIPPER_CLOSED_COLOR if state.grip_closed else GRIPPER_OPEN_COLOR
        items.append(("gripper", "pad", color,
                      _raster("rect", (GRIPPER_SIZE, GRIPPER_SIZE), state.agent)))
        return items

    def observe(self, state: EnvState) -> Observation:
        items = self._visible_parts(state)
        ent_map = np.full((IMAGE_SIZE, IMAGE_SIZE), -1, dtype=np.int32)
        part_map = np.full((IMAGE_SIZE, IMAGE_SIZE), -1, dtype=np.int32)
        image = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
        image[:] = BACKGROUND

        names = list(dict.fromkeys(n for n, _, _, _ in items))
        name_idx = {n: i for i, n in enumerate(names)}
        for k, (ent, _, color, raster) in enumerate(items):
            ent_map[raster] = name_idx[ent]
            part_map[raster] = k
            image[raster] = color

        entities = []
        for ent in names:
            ent_mask = ent_map == name_idx[ent]
            parts = {}
            for k, (name, pname, _, _) in enumerate(items):
                if name != ent:
                    continue
                parts[pname] = ent_mask & (part_map == k)
            entities.append(OracleEntityMasks(ent, ent_mask, parts))
        return Observation(image=image, entities=entities, frame_index=state.step)

    # -- dynamics ----------------------------------------------------------

    def success(self, state: EnvState) -> bool:
        t = self.template
        if t.kind == "place":
            if state.held == t.target:
                return False
            d = np.linalg.norm(state.poses[t.target] - state.poses[t.goal])
            return bool(d <= PLACE_TOL)
        if t.kind == "knob":
            return state.faucet_angle >= 1.0
        if t.kind == "pour":
            return state.poured
        raise UnknownTemplateError(t.kind)

    def step(self, state: EnvState, action) -> tuple[EnvState, Observation, bool, bool]:
        a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
        if a.shape[0] != ACTION_DIM or not np.all(np.isfinite(a)):
            a = np.zeros(ACTION_DIM)

        state = dataclasses.replace(
            state,
            poses={k: v.copy() for k, v in state.poses.items()},
            agent=state.agent.copy(),
        )

        if state.held == "faucet":
            state.faucet_angle = float(np.clip(state.faucet_angle + a[1] * TURN_RATE,
                                               0.0, 1.4))
        else:
            state.agent = np.clip(state.agent + a[:2] * MAX_STEP, *AGENT_BOUNDS)
            if state.held is not None:
                state.poses[state.held] = state.agent.copy()

        state.grip_closed = bool(a[2] > 0)
        if not state.grip_closed:
            state.held = None
        elif state.held is None:
            best, best_d = None, GRASP_RADIUS
            for name in state.entities:
                if not _SPEC_BY_NAME[name].graspable_parts:
                    continue
                for gp in _grasp_points(state, name):
                    d = float(np.linalg.norm(gp - state.agent))
                    if d <= best_d:
                        best, best_d = name, d
            if best is not None:
                state.held = best
                if _SPEC_BY_NAME[best].movable:
                    state.poses[best] = state.agent.copy()

        if (self.template.kind == "pour" and state.held == self.template.target
                and a[3] > 0.5 and self.template.goal in state.poses):
            d = np.linalg.norm(state.poses[self.template.target]
                               - state.poses[self.template.goal])
            if d <= POUR_TOL:
                state.poured = True

        state.step += 1
        success = self.success(state)
        done = success or state.step >= self.template.horizon
        return state, self.observe(state), success, done

    # -- scripted expert -----------------------------------------------------

    def scripted_expert(self, state: EnvState) -> np.ndarray:
        t = self.template
        a = np.zeros(ACTION_DIM)
        if self.success(state):
            return a

        def move(vec: np.ndarray) -> None:
            # Half-speed proportional control: slower transit spends more
            # frames near grasp/release boundaries, which makes the
            # demonstrations easier to clone accurately.
            a[:2] = np.clip(0.5 * vec / MAX_STEP, -0.5, 0.5)

        def approach_and_grab(entity: str) -> None:
            gps = _grasp_points(state, entity)
            gp = min(gps, key=lambda p: np.linalg.norm(p - state.agent))
            v = gp - state.agent
            move(v)
            # close well inside GRASP_RADIUS: a wide decision region is much
            # easier to clone than a knife-edge one
            a[2] = 1.0 if np.linalg.norm(v) <= 9.0 else -1.0

        if t.kind == "place":
            if state.held == t.target:
                v = state.poses[t.goal] - state.poses[t.target]
                # release well inside PLACE_TOL, same wide-region rationale
                if np.linalg.norm(v) <= 8.0:
                    a[2] = -1.0
                else:
                    move(v)
                    a[2] = 1.0
            elif state.held is not None:
                a[2] = -1.0
            else:
                approach_and_grab(t.target)
        elif t.kind == "knob":
            if state.held == "faucet":
                a[1] = 1.0
                a[2] = 1.0
            else:
                approach_and_grab("faucet")
        elif t.kind == "pour":
            if state.held == t.target:
                v = state.poses[t.goal] - state.poses[t.target]
                a[2] = 1.0
                # tilt well inside POUR_TOL, same wide-region rationale
                if np.linalg.norm(v) <= 8.0:
                    a[3] = 1.0
                else:
                    move(v)
            elif state.held is not None:
                a[2] = -1.0
            else:
                approach_and_grab(t.target)
        return a

    def task_spec(self) -> TaskSpec:
        return self.template.task_spec()

    def all_entity_names(self, state: EnvState) -> list[str]:
        return list(state.entities) + ["gripper"]


def scripted_occlusion_rollout(seed: int = 0, n_frames: int = 16,
                               occluded: tuple[int, int] = (5, 10)):
    """Frames where a large occluder covers the eggplant for a while and then
    leaves: exercises tracking loss and keyframe recovery."""
    env = ToyEnv("place_soft_item")
    state, obs = env.reset(seed, "ind")
    state.entities = sorted(state.entities + ["occluder"], key=_POOL_ORDER.__getitem__)
    away = np.array([110.0, 14.0])
    frames = []
    for i in range(n_frames):
        on_target = occluded[0] <= i < occluded[1]
        state.poses["occluder"] = (state.poses["eggplant"].copy() if on_target
                                   else away.copy())
        state.step = i
        frames.append(env.observe(state))
    return env, frames
