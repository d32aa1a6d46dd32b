"""Parameterized behavior primitives: Reach, Grasp, Place and Push.

Each primitive is a closed-loop controller that expands a parameter vector
into motor actions. The motion profile is rise to a safe height, translate,
then descend; the gripper never sweeps across the table during transit.

Parameter layouts (meters / radians):

========  ===================================
Reach     (x, y, z, yaw)
Grasp     (x, y, z, yaw)
Place     (x, y, z, yaw)
Push      (x, y, z, yaw, dx, dy, dz)
========  ===================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .world import (
    MAX_DELTA_POS,
    MAX_DELTA_YAW,
    WORKSPACE_HI,
    WORKSPACE_LO,
    MotorAction,
    WorldState,
    motor_action,
    step,
    wrap_angle,
)


class PrimitiveType(IntEnum):
    REACH = 0
    GRASP = 1
    PLACE = 2
    PUSH = 3
    OTHER = 4
    ATOMIC = 5


LIBRARY = (PrimitiveType.REACH, PrimitiveType.GRASP, PrimitiveType.PLACE, PrimitiveType.PUSH)
# classifier outputs: the library plus the "other" bucket, in enum order
CLASSES = LIBRARY + (PrimitiveType.OTHER,)
N_CLASSES = len(CLASSES)

PARAM_DIMS = {
    PrimitiveType.REACH: 4,
    PrimitiveType.GRASP: 4,
    PrimitiveType.PLACE: 4,
    PrimitiveType.PUSH: 7,
}
MAX_PARAM_DIM = 7

# per-primitive target-height ranges; the controller can reach all of them
Z_RANGES = {
    PrimitiveType.REACH: (0.0, 0.3),
    PrimitiveType.GRASP: (0.0, 0.06),
    PrimitiveType.PLACE: (0.0, 0.15),
    PrimitiveType.PUSH: (0.0, 0.1),
}
PUSH_XY_RANGE = 0.2
PUSH_Z_RANGE = 0.05
MAX_PUSH_NORM = 0.3


class TimeoutSegment(Warning):
    """The controller hit its step cap before converging."""


@dataclass
class PrimitiveConfig:
    eps_pos: float = 0.005
    eps_yaw: float = 0.02
    z_safe: float = 0.25
    step_cap: int = 400
    sigma: float = 0.04
    push_threshold: float = 0.02
    place_tolerance: float = 0.05


DEFAULT_CONFIG = PrimitiveConfig()


@dataclass
class Segment:
    transitions: list = field(default_factory=list)  # (state, action) pairs
    final_state: WorldState | None = None
    timed_out: bool = False

    @property
    def initial_state(self) -> WorldState:
        return self.transitions[0][0]

    @property
    def states(self) -> list:
        return [s for s, _ in self.transitions] + [self.final_state]

    def __len__(self):
        return len(self.transitions)


def param_dim(p) -> int:
    return PARAM_DIMS[PrimitiveType(p)]


def _clamp_target(x, y, z):
    return (
        min(max(x, WORKSPACE_LO[0]), WORKSPACE_HI[0]),
        min(max(y, WORKSPACE_LO[1]), WORKSPACE_HI[1]),
        min(max(z, WORKSPACE_LO[2]), WORKSPACE_HI[2]),
    )


class _Runner:
    """Steps the world while recording transitions and counting the cap."""

    def __init__(self, s: WorldState, cfg: PrimitiveConfig):
        self.s = s
        self.cfg = cfg
        self.transitions = []
        self.timed_out = False

    def act(self, a: MotorAction) -> bool:
        if len(self.transitions) >= self.cfg.step_cap:
            self.timed_out = True
            return False
        self.transitions.append((self.s, a))
        self.s = step(self.s, a)
        return True

    def move_to(self, target, yaw, close, tol=1e-9) -> bool:
        """Straight-line motion to ``target`` while turning toward ``yaw``."""
        while True:
            x, y, z = self.s.gripper_pos
            ex, ey, ez = target[0] - x, target[1] - y, target[2] - z
            eyaw = wrap_angle(yaw - self.s.gripper_yaw) if yaw is not None else 0.0
            big = max(abs(ex), abs(ey), abs(ez))
            if big <= tol:
                return True
            scale = min(1.0, MAX_DELTA_POS / big)
            dyaw = min(max(eyaw, -MAX_DELTA_YAW), MAX_DELTA_YAW)
            if not self.act(motor_action(ex * scale, ey * scale, ez * scale, dyaw, close)):
                return False

    def turn_to(self, yaw, close) -> bool:
        while True:
            eyaw = wrap_angle(yaw - self.s.gripper_yaw)
            if abs(eyaw) <= 1e-9:
                return True
            if not self.act(motor_action(0, 0, 0, eyaw, close)):
                return False

    def segment(self) -> Segment:
        return Segment(self.transitions, self.s, self.timed_out)


def _approach(run: _Runner, tx, ty, tz, yaw, close) -> bool:
    cfg = run.cfg
    x, y, z = run.s.gripper_pos
    if max(abs(tx - x), abs(ty - y)) > cfg.eps_pos:
        travel = max(z, cfg.z_safe)
        if not run.move_to((x, y, travel), yaw, close):
            return False
        if not run.move_to((tx, ty, travel), yaw, close):
            return False
    if not run.move_to((tx, ty, tz), yaw, close):
        return False
    return run.turn_to(yaw, close)


def execute_primitive(s: WorldState, p, x, cfg: PrimitiveConfig = DEFAULT_CONFIG) -> Segment:
    """Run primitive ``p`` with parameters ``x`` from state ``s``.

    Always returns a segment with at least one transition. If the step cap is
    reached the segment comes back with ``timed_out`` set.
    """
    p = PrimitiveType(p)
    if p not in LIBRARY:
        raise ValueError(f"{p.name} is not an executable primitive")
    x = np.asarray(x, dtype=float)
    if x.shape != (PARAM_DIMS[p],):
        raise ValueError(f"{p.name} expects {PARAM_DIMS[p]} parameters, got shape {x.shape}")
    tx, ty, tz = _clamp_target(float(x[0]), float(x[1]), float(x[2]))
    yaw = wrap_angle(float(x[3]))
    holding = s.held is not None
    run = _Runner(s, cfg)

    if p is PrimitiveType.GRASP:
        ok = _approach(run, tx, ty, tz, yaw, close=holding)
        while ok and run.s.held is None and run.s.aperture >= 0.1:
            ok = run.act(motor_action(close=True))
    elif p is PrimitiveType.PLACE:
        ok = _approach(run, tx, ty, tz, yaw, close=holding)
        while ok and run.s.aperture < 1.0:
            ok = run.act(motor_action(close=False))
    else:
        ok = _approach(run, tx, ty, tz, yaw, close=holding)
        if ok and p is PrimitiveType.PUSH:
            end = _clamp_target(tx + float(x[4]), ty + float(x[5]), tz + float(x[6]))
            run.move_to(end, yaw, close=holding)

    if not run.transitions:
        run.act(motor_action(close=holding))
    return run.segment()


def _pose_error(s: WorldState, x) -> tuple:
    gx, gy, gz = s.gripper_pos
    tx, ty, tz = _clamp_target(float(x[0]), float(x[1]), float(x[2]))
    dpos = math.sqrt((gx - tx) ** 2 + (gy - ty) ** 2 + (gz - tz) ** 2)
    return dpos, abs(wrap_angle(s.gripper_yaw - float(x[3])))


def primitive_success(seg: Segment, p, x, cfg: PrimitiveConfig = DEFAULT_CONFIG) -> bool:
    p = PrimitiveType(p)
    start, end = seg.initial_state, seg.final_state
    if p is PrimitiveType.REACH:
        dpos, dyaw = _pose_error(end, x)
        return dpos <= cfg.eps_pos and dyaw <= cfg.eps_yaw
    if p is PrimitiveType.GRASP:
        return start.held is None and end.held is not None
    if p is PrimitiveType.PLACE:
        if start.held is None or end.held is not None:
            return False
        o = end.object(start.held)
        return math.hypot(o.x - float(x[0]), o.y - float(x[1])) <= cfg.place_tolerance
    if p is PrimitiveType.PUSH:
        if start.held is not None or end.held is not None:
            return False
        return any(
            math.hypot(a.x - b.x, a.y - b.y) >= cfg.push_threshold
            for a, b in zip(start.objects, end.objects)
        )
    return False


def _prior_centers(p: PrimitiveType, s: WorldState) -> list:
    centers = [(o.x, o.y) for o in s.objects]
    if p in (PrimitiveType.REACH, PrimitiveType.PLACE):
        # receptacles are scene objects too; they matter for where things go, not what gets picked
        centers += [g.center for g in s.goal_regions]
    return centers


def sample_params(p, s: WorldState, mode: str, rng: np.random.Generator,
                  cfg: PrimitiveConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Draw a random parameter vector for primitive ``p``.

    ``mode="uniform"`` samples every coordinate over its legal range.
    ``mode="object_prior"`` draws the target (x, y) from an equal-weight
    Gaussian mixture centered on the objects in ``s`` (width ``cfg.sigma``,
    truncated to the table); the remaining coordinates stay uniform.
    """
    p = PrimitiveType(p)
    if p not in LIBRARY:
        raise ValueError(f"cannot sample parameters for {p.name}")
    if mode == "uniform":
        xy = rng.uniform(0.0, 1.0, size=2)
    elif mode == "object_prior":
        centers = _prior_centers(p, s)
        if not centers:
            xy = rng.uniform(0.0, 1.0, size=2)
        else:
            while True:
                c = centers[int(rng.integers(len(centers)))]
                xy = rng.normal(c, cfg.sigma)
                if 0.0 <= xy[0] <= 1.0 and 0.0 <= xy[1] <= 1.0:
                    break
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    z = rng.uniform(*Z_RANGES[p])
    yaw = rng.uniform(-math.pi, math.pi)
    out = [xy[0], xy[1], z, yaw]
    if p is PrimitiveType.PUSH:
        out += [rng.uniform(-PUSH_XY_RANGE, PUSH_XY_RANGE), rng.uniform(-PUSH_XY_RANGE, PUSH_XY_RANGE),
                rng.uniform(-PUSH_Z_RANGE, PUSH_Z_RANGE)]
    return np.array(out, dtype=float)


def random_atomic_action(rng: np.random.Generator) -> MotorAction:
    d = rng.uniform(-MAX_DELTA_POS, MAX_DELTA_POS, size=3)
    dyaw = rng.uniform(-MAX_DELTA_YAW, MAX_DELTA_YAW)
    return motor_action(d[0], d[1], d[2], dyaw, bool(rng.integers(2)))
