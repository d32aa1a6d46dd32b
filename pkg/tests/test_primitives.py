import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from primil.primitives import (
    LIBRARY,
    MAX_PUSH_NORM,
    PARAM_DIMS,
    PrimitiveConfig,
    PrimitiveType as P,
    Z_RANGES,
    execute_primitive,
    primitive_success,
    random_atomic_action,
    sample_params,
)
from primil.world import (
    PICK_PLACE_LITE,
    TIDY_UP_LITE,
    ObjectState,
    WorldState,
    reset,
    step,
)


def chained(seg):
    s = seg.transitions[0][0]
    for st_, a in seg.transitions:
        assert st_ == s
        s = step(s, a)
    return s == seg.final_state


def test_param_dims():
    assert PARAM_DIMS == {P.REACH: 4, P.GRASP: 4, P.PLACE: 4, P.PUSH: 7}


def test_reach_current_pose_is_short():
    s = reset(PICK_PLACE_LITE, 0)
    x = np.array([*s.gripper_pos, s.gripper_yaw])
    seg = execute_primitive(s, P.REACH, x)
    assert 1 <= len(seg) <= 2
    assert primitive_success(seg, P.REACH, x)


def test_grasp_object_from_home():
    s = reset(PICK_PLACE_LITE, 4)
    o = s.objects[0]
    seg = execute_primitive(s, P.GRASP, np.array([o.x, o.y, 0.01, 0.0]))
    assert seg.final_state.held == o.id
    assert primitive_success(seg, P.GRASP, np.array([o.x, o.y, 0.01, 0.0]))
    assert chained(seg)


def test_push_zero_displacement_equals_reach():
    s = reset(PICK_PLACE_LITE, 2)
    target = [0.4, 0.3, 0.1, 0.2]
    a = execute_primitive(s, P.PUSH, np.array(target + [0.0, 0.0, 0.0]))
    b = execute_primitive(s, P.REACH, np.array(target))
    assert a.final_state == b.final_state


def test_push_moves_object_and_succeeds():
    s = reset(PICK_PLACE_LITE, 2)
    o = s.objects[0]
    x = np.array([o.x - 0.04, o.y, 0.02, 0.0, 0.1, 0.0, 0.0])
    seg = execute_primitive(s, P.PUSH, x)
    assert primitive_success(seg, P.PUSH, x)
    assert seg.final_state.objects[0].x > o.x + 0.05


def test_push_without_contact_fails():
    s = reset(PICK_PLACE_LITE, 2)
    x = np.array([0.9, 0.1, 0.02, 0.0, 0.05, 0.0, 0.0])
    assert not primitive_success(execute_primitive(s, P.PUSH, x), P.PUSH, x)


def test_place_after_grasp():
    s = reset(PICK_PLACE_LITE, 5)
    o = s.objects[0]
    s = execute_primitive(s, P.GRASP, np.array([o.x, o.y, 0.01, 0.0])).final_state
    x = np.array([0.7, 0.55, 0.05, 0.0])
    seg = execute_primitive(s, P.PLACE, x)
    assert primitive_success(seg, P.PLACE, x)
    assert seg.final_state.aperture == 1.0


def test_reach_timeout_fails():
    cfg = PrimitiveConfig(step_cap=3)
    s = reset(PICK_PLACE_LITE, 0)
    x = np.array([0.9, 0.9, 0.1, 0.0])
    seg = execute_primitive(s, P.REACH, x, cfg)
    assert seg.timed_out and len(seg) == 3
    assert not primitive_success(seg, P.REACH, x, cfg)


def test_other_is_not_executable():
    s = reset(PICK_PLACE_LITE, 0)
    with pytest.raises(ValueError):
        execute_primitive(s, P.OTHER, np.zeros(4))
    with pytest.raises(ValueError):
        execute_primitive(s, P.ATOMIC, np.zeros(4))


def test_object_prior_mean():
    s = WorldState((0.5, 0.1, 0.25), 0.0, 1.0, None, (ObjectState(0, "disc", (0.02,), 0.3, 0.7, 0.0, "small"),))
    rng = np.random.default_rng(0)
    xs = np.array([sample_params(P.GRASP, s, "object_prior", rng)[:2] for _ in range(10_000)])
    assert np.allclose(xs.mean(axis=0), (0.3, 0.7), atol=0.01)
    assert np.allclose(xs.std(axis=0), 0.04, atol=0.004)


def test_sampling_is_seeded():
    s = reset(TIDY_UP_LITE, 1)
    for p in LIBRARY:
        a = sample_params(p, s, "object_prior", np.random.default_rng(9))
        b = sample_params(p, s, "object_prior", np.random.default_rng(9))
        assert np.array_equal(a, b)


@given(seed=st.integers(0, 2**32), p=st.sampled_from(LIBRARY), mode=st.sampled_from(["uniform", "object_prior"]))
def test_sampled_params_legal(seed, p, mode):
    s = reset(TIDY_UP_LITE, seed)
    x = sample_params(p, s, mode, np.random.default_rng(seed))
    assert x.shape == (PARAM_DIMS[p],)
    assert 0 <= x[0] <= 1 and 0 <= x[1] <= 1
    assert Z_RANGES[p][0] <= x[2] <= Z_RANGES[p][1]
    assert -math.pi <= x[3] <= math.pi
    if p == P.PUSH:
        assert np.linalg.norm(x[4:]) <= MAX_PUSH_NORM


@given(seed=st.integers(0, 2**32), p=st.sampled_from(LIBRARY))
def test_replayable_and_grasp_monotone(seed, p):
    rng = np.random.default_rng(seed)
    s = reset(PICK_PLACE_LITE, seed)
    for _ in range(int(rng.integers(0, 3))):
        s = step(s, random_atomic_action(rng))
    x = sample_params(p, s, "object_prior", rng)
    a = execute_primitive(s, p, x)
    b = execute_primitive(a.initial_state, p, x)
    assert a.transitions == b.transitions and a.final_state == b.final_state
    assert chained(a)
    for _, act in a.transitions:
        assert all(abs(v) <= 0.02 for v in act.delta_pos) and abs(act.delta_yaw) <= 0.1
    if p == P.GRASP:
        attached = any(u.held is None and v.held is not None for u, v in zip(a.states, a.states[1:]))
        assert primitive_success(a, p, x) == (attached and s.held is None)
