"""Scripted demonstrators standing in for human teleoperation.

A demonstrator reads the privileged world state, lays out waypoints and
gripper events for the task, and tracks them with an easing proportional
controller. Each seed also draws a "style" (speed, gain, hover and release
heights, where in the bin to drop things) so the demonstration set has the
spread a group of human operators would give it. ``noise`` adds zero-mean
uniform jitter to every motor command.

Only motor actions are stored. Demonstrations never carry primitive labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .records import read_records, write_records
from .world import (
    MAX_DELTA_POS,
    MAX_DELTA_YAW,
    MotorAction,
    TaskSpec,
    WorldState,
    get_task,
    motor_action,
    reset,
    rng_for,
    step,
    task_success,
    wrap_angle,
)

MAX_ATTEMPTS = 5
_WAYPOINT_CAP = 120


class DemoFailure(RuntimeError):
    pass


@dataclass
class Demonstration:
    task: str
    seed: int
    frames: list = field(default_factory=list)  # (state, action) pairs
    final_state: WorldState | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def states(self) -> list:
        return [s for s, _ in self.frames] + [self.final_state]

    @property
    def actions(self) -> list:
        return [a for _, a in self.frames]

    @property
    def initial_state(self) -> WorldState:
        return self.frames[0][0] if self.frames else self.final_state

    def __eq__(self, other):
        if not isinstance(other, Demonstration):
            return NotImplemented
        return (self.task, self.seed, self.frames, self.final_state) == (
            other.task, other.seed, other.frames, other.final_state)


@dataclass
class _Style:
    speed: float
    gain: float
    hover_z: float
    grasp_z: float
    carry_z: float
    release_z: float
    retreat_z: float
    yaw: float
    drop_offset: tuple


def _draw_style(rng) -> _Style:
    return _Style(
        speed=rng.uniform(0.45, 0.8) * MAX_DELTA_POS,
        gain=rng.uniform(0.3, 0.55),
        hover_z=rng.uniform(0.09, 0.16),
        grasp_z=rng.uniform(0.008, 0.02),
        carry_z=rng.uniform(0.1, 0.17),
        release_z=rng.uniform(0.03, 0.07),
        retreat_z=rng.uniform(0.1, 0.16),
        yaw=rng.uniform(-0.6, 0.6),
        drop_offset=tuple(rng.uniform(-0.04, 0.04, size=2)),
    )


class _Operator:
    def __init__(self, s: WorldState, style: _Style, noise: float, rng):
        self.s = s
        self.style = style
        self.noise = noise
        self.rng = rng
        self.frames = []

    def _emit(self, dx, dy, dz, dyaw, close):
        if self.noise > 0.0:
            j = self.rng.uniform(-1.0, 1.0, size=4) * self.noise
            dx += j[0] * MAX_DELTA_POS
            dy += j[1] * MAX_DELTA_POS
            dz += j[2] * MAX_DELTA_POS
            dyaw += j[3] * MAX_DELTA_YAW
        a = motor_action(dx, dy, dz, dyaw, close)
        self.frames.append((self.s, a))
        self.s = step(self.s, a)

    def goto(self, target, close, tol=0.004):
        st = self.style
        for _ in range(_WAYPOINT_CAP):
            x, y, z = self.s.gripper_pos
            e = np.array([target[0] - x, target[1] - y, target[2] - z])
            eyaw = wrap_angle(st.yaw - self.s.gripper_yaw)
            if np.max(np.abs(e)) <= tol:
                return
            v = st.gain * e
            n = np.max(np.abs(v))
            if n > st.speed:
                v *= st.speed / n
            self._emit(v[0], v[1], v[2], st.gain * eyaw, close)

    def close_gripper(self):
        for _ in range(8):
            if self.s.held is not None and self.s.aperture < 0.1:
                return
            self._emit(0.0, 0.0, 0.0, 0.0, True)

    def open_gripper(self):
        for _ in range(8):
            if self.s.aperture >= 1.0:
                return
            self._emit(0.0, 0.0, 0.0, 0.0, False)

    def pick(self, oid):
        st = self.style
        o = self.s.object(oid)
        self.goto((o.x, o.y, st.hover_z), close=False)
        o = self.s.object(oid)
        self.goto((o.x, o.y, st.grasp_z), close=False, tol=0.0025)
        self.close_gripper()
        x, y, _ = self.s.gripper_pos
        self.goto((x, y, st.carry_z), close=True)

    def place(self, xy):
        st = self.style
        self.goto((xy[0], xy[1], st.carry_z), close=True)
        self.goto((xy[0], xy[1], st.release_z), close=True)
        self.open_gripper()

    def retreat(self):
        x, y, _ = self.s.gripper_pos
        self.goto((x, y, self.style.retreat_z), close=False)

    def push(self, oid, goal_xy):
        """Push object ``oid`` along x until its center reaches ``goal_xy[0]``."""
        o = self.s.object(oid)
        half = max(o.size) if o.shape == "box" else o.size[0]
        back = o.x - 1.45 * half - 0.03
        self.goto((back, o.y, self.style.hover_z), close=False)
        self.goto((back, o.y, 0.02), close=False)
        dist = goal_xy[0] - o.x
        x, y, _ = self.s.gripper_pos
        self.goto((x + dist + 0.03, y, 0.02), close=False, tol=0.003)
        x, y, _ = self.s.gripper_pos
        self.goto((x, y, self.style.hover_z), close=False)


def _bin_point(region, style, margin=0.02):
    cx, cy = region.center
    hx = 0.5 * (region.hi[0] - region.lo[0]) - margin
    hy = 0.5 * (region.hi[1] - region.lo[1]) - margin
    ox, oy = style.drop_offset
    return (cx + max(-hx, min(hx, ox)), cy + max(-hy, min(hy, oy)))


def _script_pick_place(op: _Operator, task: TaskSpec):
    obj = task.objects[0].id
    region = task.goal_regions[0]
    op.pick(obj)
    op.place(_bin_point(region, op.style))
    op.retreat()


def _script_tidy_up(op: _Operator, task: TaskSpec):
    s = op.s
    large = [o for o in s.objects if o.kind == "large"]
    smalls = [o for o in s.objects if o.kind == "small"]
    mats = [g for g in task.goal_regions if g.kind == "large"]
    bins = [g for g in task.goal_regions if g.kind == "small"]
    for o, g in zip(large, mats):
        op.push(o.id, (g.center[0] + op.style.drop_offset[0], g.center[1]))
    # nearer object goes to the nearer bin
    smalls.sort(key=lambda o: o.x)
    bins = sorted(bins, key=lambda g: g.center[0])
    for o, g in zip(smalls, bins):
        op.pick(o.id)
        op.place(_bin_point(g, op.style))
    op.retreat()


_SCRIPTS = {"PickPlaceLite": _script_pick_place, "TidyUpLite": _script_tidy_up}


def script_demo(task: TaskSpec | str, seed: int, noise: float = 0.0) -> Demonstration:
    """Produce one successful demonstration for ``task`` from ``reset(task, seed)``."""
    if isinstance(task, str):
        task = get_task(task)
    if not 0.0 <= noise <= 0.5:
        raise ValueError("noise must lie in [0, 0.5]")
    script = _SCRIPTS.get(task.name)
    if script is None:
        raise DemoFailure(f"no demonstrator for task {task.name!r}")
    s0 = reset(task, seed)
    style = _draw_style(rng_for(seed, 0x57))
    for attempt in range(MAX_ATTEMPTS):
        op = _Operator(s0, style, noise, rng_for(seed, 0xD1, attempt))
        script(op, task)
        if op.frames and task_success(op.s, task):
            return Demonstration(task.name, int(seed), op.frames, op.s)
    raise DemoFailure(f"{task.name} seed {seed}: no successful attempt in {MAX_ATTEMPTS}")


def replay_actions(demo: Demonstration) -> WorldState:
    s = demo.initial_state
    for _, a in demo.frames:
        s = step(s, a)
    return s


def save_demos(demos, path):
    records = []
    for d in demos:
        records.append({
            "task": d.task,
            "seed": d.seed,
            "states": [s.to_dict() for s in d.states],
            "actions": [a.to_list() for a in d.actions],
        })
    return write_records(path, "demos", records, count=len(records))


def load_demos(path) -> list:
    _, records = read_records(path, kind="demos")
    out = []
    for r in records:
        states = [WorldState.from_dict(s) for s in r["states"]]
        actions = [MotorAction.from_list(a) for a in r["actions"]]
        out.append(Demonstration(r["task"], r["seed"], list(zip(states[:-1], actions)), states[-1]))
    return out
