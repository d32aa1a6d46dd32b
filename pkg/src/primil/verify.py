"""Independent checkers used by the test and acceptance suites.

Nothing in the main pipeline imports this module.
"""

from __future__ import annotations

import itertools

import numpy as np

from .parser import tiebreak_key  # noqa: F401  (one tie-break order for DP and oracle)
from .primitives import PrimitiveType, execute_primitive, primitive_success
from .world import step

MAX_ENUM_BOUNDARIES = 18


def enumerate_segmentations(n_boundaries: int, n_types: int | None = None):
    """Every segmentation of ``n_boundaries`` candidate boundaries.

    Yields tuples of boundary indices that start at 0 and end at
    ``n_boundaries - 1``: all ``2**(n-2)`` subsets of the interior. With
    ``n_types`` each segmentation is further expanded over a type for every
    segment and ``(cut, types)`` pairs are yielded.
    """
    if n_boundaries > MAX_ENUM_BOUNDARIES:
        from .parser import TooLarge

        raise TooLarge(f"{n_boundaries} boundaries exceed {MAX_ENUM_BOUNDARIES}")
    if n_boundaries < 2:
        return
    inner = range(1, n_boundaries - 1)
    for mask in range(1 << len(inner)):
        cut = (0, *(b for k, b in enumerate(inner) if mask >> k & 1), n_boundaries - 1)
        if n_types is None:
            yield cut
        else:
            for types in itertools.product(range(n_types), repeat=len(cut) - 1):
                yield cut, types


def finite_difference_grad(f, params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    params = np.asarray(params, dtype=float)
    g = np.empty_like(params)
    work = params.copy()
    for i in range(params.size):
        old = work.flat[i]
        work.flat[i] = old + h
        fp = f(work)
        work.flat[i] = old - h
        fm = f(work)
        work.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def gradient_check(model, X, T, w, h: float = 1e-6) -> float:
    """Relative error between a model's analytic and numerical loss gradients."""
    _, g = model.loss_grad(model.theta, X, T, w)
    num = finite_difference_grad(lambda th: model.loss(X, T, w, theta=th), model.theta, h)
    return relative_error(g, num)


def monte_carlo_mean(sampler, n: int) -> np.ndarray:
    return np.mean(np.stack([sampler() for _ in range(n)]), axis=0)


def audit_positives(ds) -> list:
    """Indices of labelled samples whose primitive does not reproduce on re-execution."""
    bad = []
    for i, p in enumerate(ds.p):
        if p == PrimitiveType.OTHER:
            continue
        x = ds.x[i][~np.isnan(ds.x[i])]
        seg = execute_primitive(ds.start_states[i], p, x)
        if seg.final_state != ds.end_states[i] or not primitive_success(seg, p, x):
            bad.append(i)
    return bad


def audit_demo(demo) -> bool:
    """Re-simulate the recorded actions and compare every state."""
    s = demo.initial_state
    for (rec, a) in demo.frames:
        if rec != s:
            return False
        s = step(s, a)
    return s == demo.final_state
