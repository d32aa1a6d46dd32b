"""Deterministic 2.5-D tabletop world.

The gripper moves in 3-D (x, y, z) with a yaw angle; objects live on the
table plane with a planar pose (x, y, theta). Contact is purely kinematic:

* closing the gripper low enough and close enough to an object attaches it,
* opening detaches the held object where it is,
* an open-handed gripper moving near table height drags along every object
  whose footprint its swept segment crosses.

Everything is plain Python floats so a single step is cheap; all functions are
pure and return new states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

WORKSPACE_LO = (0.0, 0.0, 0.0)
WORKSPACE_HI = (1.0, 1.0, 0.3)

MAX_DELTA_POS = 0.02
MAX_DELTA_YAW = 0.1
APERTURE_RATE = 0.2
Z_GRASP = 0.03
Z_PUSH = 0.05
GRASP_RADIUS = 0.03

HOME_POS = (0.5, 0.1, 0.25)

_MAX_LAYOUT_ATTEMPTS = 100


class InitError(RuntimeError):
    """Objects could not be placed without overlap."""


class ConfigError(ValueError):
    """A task description is malformed."""


def _clip(v, lo, hi):
    return lo if v < lo else hi if v > hi else v


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class ObjectState:
    id: int
    shape: str  # "disc" or "box"
    size: tuple  # (radius,) for discs, (hx, hy) for boxes
    x: float
    y: float
    theta: float
    kind: str  # "small" or "large"

    @property
    def bounding_radius(self) -> float:
        if self.shape == "disc":
            return self.size[0]
        return math.hypot(*self.size)

    def contains_point(self, px: float, py: float) -> bool:
        return _segment_hits(self, px, py, px, py)


@dataclass(frozen=True)
class GoalRegion:
    kind: str
    lo: tuple  # (x, y)
    hi: tuple

    @property
    def center(self) -> tuple:
        return (0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1]))

    def contains(self, x: float, y: float) -> bool:
        return self.lo[0] < x < self.hi[0] and self.lo[1] < y < self.hi[1]


@dataclass(frozen=True)
class WorldState:
    gripper_pos: tuple
    gripper_yaw: float
    aperture: float
    held: int | None
    objects: tuple
    step_count: int = 0
    goal_regions: tuple = ()

    def object(self, oid: int) -> ObjectState:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def to_dict(self) -> dict:
        return {
            "gripper_pos": list(self.gripper_pos),
            "gripper_yaw": self.gripper_yaw,
            "aperture": self.aperture,
            "held": self.held,
            "step_count": self.step_count,
            "objects": [
                {"id": o.id, "shape": o.shape, "size": list(o.size), "x": o.x,
                 "y": o.y, "theta": o.theta, "kind": o.kind}
                for o in self.objects
            ],
            "goal_regions": [
                {"kind": g.kind, "lo": list(g.lo), "hi": list(g.hi)} for g in self.goal_regions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        return cls(
            gripper_pos=tuple(d["gripper_pos"]),
            gripper_yaw=d["gripper_yaw"],
            aperture=d["aperture"],
            held=d["held"],
            step_count=d["step_count"],
            objects=tuple(
                ObjectState(o["id"], o["shape"], tuple(o["size"]), o["x"], o["y"], o["theta"], o["kind"])
                for o in d["objects"]
            ),
            goal_regions=tuple(
                GoalRegion(g["kind"], tuple(g["lo"]), tuple(g["hi"])) for g in d["goal_regions"]
            ),
        )


@dataclass(frozen=True)
class MotorAction:
    """Low-level 5-DoF command. Use :func:`motor_action` to build a clamped one."""

    delta_pos: tuple = (0.0, 0.0, 0.0)
    delta_yaw: float = 0.0
    close: bool = False

    @property
    def grip(self) -> str:
        return "close" if self.close else "open"

    def to_vector(self) -> np.ndarray:
        return np.array([*self.delta_pos, self.delta_yaw, 1.0 if self.close else -1.0])

    @classmethod
    def from_vector(cls, v) -> "MotorAction":
        return motor_action(v[0], v[1], v[2], v[3], v[4] > 0.0)

    def to_list(self) -> list:
        return [*self.delta_pos, self.delta_yaw, bool(self.close)]

    @classmethod
    def from_list(cls, v) -> "MotorAction":
        return cls((v[0], v[1], v[2]), v[3], bool(v[4]))


def motor_action(dx=0.0, dy=0.0, dz=0.0, dyaw=0.0, close=False) -> MotorAction:
    m = MAX_DELTA_POS
    return MotorAction(
        (_clip(float(dx), -m, m), _clip(float(dy), -m, m), _clip(float(dz), -m, m)),
        _clip(float(dyaw), -MAX_DELTA_YAW, MAX_DELTA_YAW),
        bool(close),
    )


@dataclass(frozen=True)
class ObjectLayout:
    id: int
    shape: str
    size: tuple
    kind: str
    init_lo: tuple  # (x, y, theta)
    init_hi: tuple


@dataclass(frozen=True)
class TaskSpec:
    name: str
    objects: tuple  # of ObjectLayout
    goal_regions: tuple  # of GoalRegion
    home: tuple = HOME_POS

    def __post_init__(self):
        kinds = {o.kind for o in self.objects}
        for g in self.goal_regions:
            if g.kind not in kinds:
                raise ConfigError(f"goal region needs kind {g.kind!r} but layout only has {sorted(kinds)}")
        for o in self.objects:
            if o.shape not in ("disc", "box"):
                raise ConfigError(f"unknown shape {o.shape!r}")
            if any(v <= 0 for v in o.size):
                raise ConfigError(f"object {o.id} has non-positive size")
            if any(lo > hi for lo, hi in zip(o.init_lo, o.init_hi)):
                raise ConfigError(f"object {o.id} has an empty init range")


PICK_PLACE_LITE = TaskSpec(
    name="PickPlaceLite",
    objects=(
        ObjectLayout(0, "disc", (0.02,), "small", (0.15, 0.4, 0.0), (0.3, 0.75, 0.0)),
    ),
    goal_regions=(GoalRegion("small", (0.6, 0.4), (0.85, 0.75)),),
)

TIDY_UP_LITE = TaskSpec(
    name="TidyUpLite",
    objects=(
        ObjectLayout(0, "box", (0.05, 0.05), "large", (0.12, 0.62, -0.3), (0.25, 0.78, 0.3)),
        ObjectLayout(1, "disc", (0.02,), "small", (0.08, 0.15, 0.0), (0.22, 0.4, 0.0)),
        ObjectLayout(2, "disc", (0.02,), "small", (0.3, 0.15, 0.0), (0.42, 0.4, 0.0)),
    ),
    goal_regions=(
        GoalRegion("large", (0.45, 0.55), (0.8, 0.88)),
        GoalRegion("small", (0.58, 0.1), (0.74, 0.32)),
        GoalRegion("small", (0.78, 0.1), (0.94, 0.32)),
    ),
)

TASKS = {t.name: t for t in (PICK_PLACE_LITE, TIDY_UP_LITE)}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None


def task_from_dict(d: dict) -> TaskSpec:
    """Build a task from its config mapping.

    Keys: ``name``; ``objects``: list of ``{id, shape, size, kind, init_lo,
    init_hi}`` where ``init_lo``/``init_hi`` are ``[x, y, theta]``;
    ``goal_regions``: list of ``{kind, lo: [x, y], hi: [x, y]}``; optional
    ``home``: ``[x, y, z]``.
    """
    try:
        objects = tuple(
            ObjectLayout(int(o["id"]), o["shape"], tuple(float(v) for v in o["size"]), o["kind"],
                         tuple(float(v) for v in o["init_lo"]), tuple(float(v) for v in o["init_hi"]))
            for o in d["objects"]
        )
        goals = tuple(
            GoalRegion(g["kind"], tuple(float(v) for v in g["lo"]), tuple(float(v) for v in g["hi"]))
            for g in d["goal_regions"]
        )
        home = tuple(float(v) for v in d.get("home", HOME_POS))
        return TaskSpec(d["name"], objects, goals, home)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed task config: {exc}") from exc


def task_to_dict(task: TaskSpec) -> dict:
    return {
        "name": task.name,
        "home": list(task.home),
        "objects": [
            {"id": o.id, "shape": o.shape, "size": list(o.size), "kind": o.kind,
             "init_lo": list(o.init_lo), "init_hi": list(o.init_hi)}
            for o in task.objects
        ],
        "goal_regions": [{"kind": g.kind, "lo": list(g.lo), "hi": list(g.hi)} for g in task.goal_regions],
    }


def load_task(path) -> TaskSpec:
    return task_from_dict(json.loads(Path(path).read_text()))


def rng_for(*keys: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of integers."""
    ss = np.random.SeedSequence([int(k) % (1 << 64) for k in keys])
    return np.random.Generator(np.random.Philox(ss))


def reset(task: TaskSpec, seed: int) -> WorldState:
    rng = rng_for(seed, 0x5E7)
    for _ in range(_MAX_LAYOUT_ATTEMPTS):
        placed = []
        for lay in task.objects:
            x, y, th = (float(v) for v in rng.uniform(lay.init_lo, lay.init_hi))
            placed.append(ObjectState(lay.id, lay.shape, lay.size, x, y, wrap_angle(th), lay.kind))
        if not _any_overlap(placed):
            return WorldState(
                gripper_pos=tuple(task.home),
                gripper_yaw=0.0,
                aperture=1.0,
                held=None,
                objects=tuple(placed),
                step_count=0,
                goal_regions=task.goal_regions,
            )
    raise InitError(f"{task.name}: no collision-free layout after {_MAX_LAYOUT_ATTEMPTS} attempts")


def _any_overlap(objs) -> bool:
    for i, a in enumerate(objs):
        for b in objs[i + 1:]:
            if math.hypot(a.x - b.x, a.y - b.y) < a.bounding_radius + b.bounding_radius:
                return True
    return False


def _segment_hits(o: ObjectState, x0, y0, x1, y1) -> bool:
    """Does the segment (x0,y0)-(x1,y1) touch the object's footprint?"""
    if o.shape == "disc":
        r = o.size[0]
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        if L2 > 0.0:
            t = _clip(((o.x - x0) * dx + (o.y - y0) * dy) / L2, 0.0, 1.0)
        else:
            t = 0.0
        cx, cy = x0 + t * dx - o.x, y0 + t * dy - o.y
        return cx * cx + cy * cy <= r * r
    # box: move the segment into the box frame and clip against the slab
    c, s = math.cos(o.theta), math.sin(o.theta)
    ax, ay = x0 - o.x, y0 - o.y
    bx, by = x1 - o.x, y1 - o.y
    p0 = (c * ax + s * ay, -s * ax + c * ay)
    p1 = (c * bx + s * by, -s * bx + c * by)
    t_lo, t_hi = 0.0, 1.0
    for k, h in enumerate(o.size):
        d = p1[k] - p0[k]
        if d == 0.0:
            if abs(p0[k]) > h:
                return False
            continue
        ta, tb = (-h - p0[k]) / d, (h - p0[k]) / d
        if ta > tb:
            ta, tb = tb, ta
        t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
        if t_lo > t_hi:
            return False
    return True


def step(s: WorldState, a: MotorAction) -> WorldState:
    m = MAX_DELTA_POS
    dx, dy, dz = (_clip(v, -m, m) for v in a.delta_pos)
    dyaw = _clip(a.delta_yaw, -MAX_DELTA_YAW, MAX_DELTA_YAW)
    x0, y0, z0 = s.gripper_pos
    x1 = _clip(x0 + dx, WORKSPACE_LO[0], WORKSPACE_HI[0])
    y1 = _clip(y0 + dy, WORKSPACE_LO[1], WORKSPACE_HI[1])
    z1 = _clip(z0 + dz, WORKSPACE_LO[2], WORKSPACE_HI[2])
    yaw1 = wrap_angle(s.gripper_yaw + dyaw) if dyaw else s.gripper_yaw
    mx, my = x1 - x0, y1 - y0

    objects = s.objects
    held = s.held
    if held is None and z1 <= Z_PUSH and (mx != 0.0 or my != 0.0):
        moved = []
        for o in objects:
            if _segment_hits(o, x0, y0, x1, y1):
                o = replace(o, x=_clip(o.x + mx, 0.0, 1.0), y=_clip(o.y + my, 0.0, 1.0))
            moved.append(o)
        objects = tuple(moved)

    if a.close:
        aperture = max(0.0, round(s.aperture - APERTURE_RATE, 12))
        if held is None and z1 <= Z_GRASP:
            best, best_d = None, GRASP_RADIUS
            for o in objects:
                d = math.hypot(o.x - x1, o.y - y1)
                if d <= best_d:
                    best, best_d = o.id, d
            held = best
    else:
        aperture = min(1.0, round(s.aperture + APERTURE_RATE, 12))
        held = None

    # a held object rides with the gripper; on release it stays where the gripper is
    carried = held if held is not None else s.held
    if carried is not None:
        objects = tuple(
            replace(o, x=x1, y=y1, theta=wrap_angle(o.theta + dyaw)) if o.id == carried else o
            for o in objects
        )

    return WorldState((x1, y1, z1), yaw1, aperture, held, objects, s.step_count + 1, s.goal_regions)


def task_success(s: WorldState, task: TaskSpec | None = None) -> bool:
    if s.held is not None:
        return False
    regions = task.goal_regions if task is not None else s.goal_regions
    for g in regions:
        if not any(o.kind == g.kind and g.contains(o.x, o.y) for o in s.objects):
            return False
    return True


def in_workspace(s: WorldState) -> bool:
    x, y, z = s.gripper_pos
    ok = all(lo <= v <= hi for v, lo, hi in zip((x, y, z), WORKSPACE_LO, WORKSPACE_HI))
    return ok and all(0.0 <= o.x <= 1.0 and 0.0 <= o.y <= 1.0 for o in s.objects)
