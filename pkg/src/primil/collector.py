"""Self-supervised data collection for the inverse dynamics model.

A random agent alternates between library primitives with randomly drawn
parameters and single random motor actions. Primitive rollouts that meet
their success criterion become labelled ``(s, s', p, x)`` samples. Random
state pairs from the stitched episode become "other" samples. Each class is
finally reweighted by the inverse of its count.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .primitives import (
    CLASSES,
    LIBRARY,
    MAX_PARAM_DIM,
    DEFAULT_CONFIG,
    PrimitiveConfig,
    PrimitiveType,
    execute_primitive,
    primitive_success,
    random_atomic_action,
    sample_params,
)
from .records import read_records, write_records
from .world import TaskSpec, WorldState, get_task, reset, rng_for, step

log = logging.getLogger(__name__)

GRIPPER_FEATURES = 7
OBJECT_FEATURES = 5


class RosterMismatch(ValueError):
    pass


class MissingTypeWarning(UserWarning):
    pass


def feature_dim(n_objects: int) -> int:
    return GRIPPER_FEATURES + OBJECT_FEATURES * n_objects


def featurize(s: WorldState, n_objects: int | None = None) -> np.ndarray:
    """State features, in order:

    gripper x, y, z, sin(yaw), cos(yaw), aperture, held flag, then for each
    object (in roster order) x, y, sin(theta), cos(theta), large flag.
    """
    if n_objects is not None and len(s.objects) != n_objects:
        raise RosterMismatch(f"expected {n_objects} objects, state has {len(s.objects)}")
    x, y, z = s.gripper_pos
    out = [x, y, z, math.sin(s.gripper_yaw), math.cos(s.gripper_yaw), s.aperture,
           0.0 if s.held is None else 1.0]
    for o in s.objects:
        out += [o.x, o.y, math.sin(o.theta), math.cos(o.theta), 1.0 if o.kind == "large" else 0.0]
    return np.array(out)


def featurize_many(states, n_objects: int | None = None) -> np.ndarray:
    return np.stack([featurize(s, n_objects) for s in states])


@dataclass
class CollectorConfig:
    episodes: int = 2000
    horizon: int = 15
    negatives: int = 10
    primitive_prob: float = 0.5
    prior_mode: str = "object_prior"
    seed: int = 0

    def __post_init__(self):
        if min(self.episodes, self.horizon, self.negatives) < 1:
            raise ValueError("episodes, horizon and negatives must all be >= 1")
        if not 0.0 <= self.primitive_prob <= 1.0:
            raise ValueError("primitive_prob must lie in [0, 1]")
        if self.prior_mode not in ("uniform", "object_prior"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")


@dataclass
class IdmSample:
    s: np.ndarray
    s_prime: np.ndarray
    p: PrimitiveType
    x: np.ndarray | None
    weight: float = 1.0
    episode: int = -1
    start_state: WorldState | None = None  # kept for replay audits
    end_state: WorldState | None = None

    def __post_init__(self):
        if (self.p == PrimitiveType.OTHER) != (self.x is None):
            raise ValueError("x must be None exactly for OTHER samples")


@dataclass
class EpisodeOutput:
    index: int
    positives: list
    negatives: list
    states: list | None = None  # stitched trajectory s_0 .. s_T
    boundaries: list = field(default_factory=list)  # sub-rollout start/end indices
    attempts: dict = field(default_factory=dict)  # primitive -> tries


def _endpoint(rng, n_states, boundaries):
    if rng.random() < 0.5:
        return int(boundaries[int(rng.integers(len(boundaries)))])
    return int(rng.integers(n_states))


def collect_episode(task: TaskSpec, cfg: CollectorConfig, episode_index: int,
                    prim_cfg: PrimitiveConfig = DEFAULT_CONFIG, keep_states: bool = True) -> EpisodeOutput:
    rng = rng_for(cfg.seed, episode_index, 0xC0)
    n_obj = len(task.objects)
    s = reset(task, rng_for(cfg.seed, episode_index, 0x1)
              .integers(0, 2**63 - 1))
    states = [s]
    boundaries = [0]
    positives = []
    attempts = {p: 0 for p in LIBRARY}
    for _ in range(cfg.horizon):
        if rng.random() < cfg.primitive_prob:
            p = LIBRARY[int(rng.integers(len(LIBRARY)))]
            x = sample_params(p, s, cfg.prior_mode, rng, prim_cfg)
            seg = execute_primitive(s, p, x, prim_cfg)
            attempts[p] += 1
            if not seg.timed_out and primitive_success(seg, p, x, prim_cfg):
                positives.append(IdmSample(featurize(s, n_obj), featurize(seg.final_state, n_obj), p, x,
                                           episode=episode_index, start_state=s, end_state=seg.final_state))
            states.extend(seg.states[1:])
            s = seg.final_state
        else:
            s = step(s, random_atomic_action(rng))
            states.append(s)
        boundaries.append(len(states) - 1)

    negatives = []
    n = len(states)
    for _ in range(cfg.negatives):
        while True:
            j, l = _endpoint(rng, n, boundaries), _endpoint(rng, n, boundaries)
            if j != l:
                break
        j, l = min(j, l), max(j, l)
        negatives.append(IdmSample(featurize(states[j], n_obj), featurize(states[l], n_obj),
                                   PrimitiveType.OTHER, None, episode=episode_index,
                                   start_state=states[j], end_state=states[l]))
    return EpisodeOutput(episode_index, positives, negatives, states if keep_states else None,
                         boundaries, attempts)


def _collect_job(args):
    task, cfg, idx, prim_cfg = args
    return collect_episode(task, cfg, idx, prim_cfg, keep_states=False)


def collect(task: TaskSpec, cfg: CollectorConfig, workers: int = 1,
            prim_cfg: PrimitiveConfig = DEFAULT_CONFIG) -> list:
    """Run all episodes; results come back in episode order whatever ``workers`` is."""
    jobs = [(task, cfg, i, prim_cfg) for i in range(cfg.episodes)]
    if workers <= 1:
        return [_collect_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_collect_job, jobs, chunksize=16))


@dataclass
class IdmDataset:
    s: np.ndarray  # (N, d)
    s_prime: np.ndarray  # (N, d)
    p: np.ndarray  # (N,) int class ids
    x: np.ndarray  # (N, MAX_PARAM_DIM), NaN padded; all NaN for OTHER
    weight: np.ndarray  # (N,)
    episode: np.ndarray  # (N,)
    start_states: list = field(default_factory=list)
    end_states: list = field(default_factory=list)
    task: str = ""

    def __len__(self):
        return len(self.p)

    @property
    def feature_dim(self) -> int:
        return self.s.shape[1]

    def counts(self) -> dict:
        return {PrimitiveType(c).name: int(np.sum(self.p == c)) for c in CLASSES}

    def subset(self, idx) -> "IdmDataset":
        idx = np.asarray(idx)
        pick = lambda L: [L[i] for i in idx] if L else []
        return IdmDataset(self.s[idx], self.s_prime[idx], self.p[idx], self.x[idx], self.weight[idx],
                          self.episode[idx], pick(self.start_states), pick(self.end_states), self.task)

    def split(self, holdout: float = 0.1, seed: int = 0):
        """Deterministic (train, held-out) split by sample."""
        order = rng_for(seed, 0x5B1).permutation(len(self))
        k = int(round(holdout * len(self)))
        return self.subset(np.sort(order[k:])), self.subset(np.sort(order[:k]))

    def params_for(self, p) -> tuple:
        """Inputs and parameter targets of every sample of type ``p``."""
        from .primitives import param_dim

        m = self.p == int(p)
        return (np.hstack([self.s[m], self.s_prime[m]]), self.x[m, : param_dim(p)], self.weight[m])


def build_dataset(episode_outputs, seed: int = 0, task: str = "") -> IdmDataset:
    samples = []
    for out in sorted(episode_outputs, key=lambda o: o.index):
        samples.extend(out.positives)
        samples.extend(out.negatives)
    if not samples:
        raise ValueError("no samples to build a dataset from")
    p = np.array([int(x.p) for x in samples])
    counts = {c: int(np.sum(p == c)) for c in CLASSES}
    missing = [PrimitiveType(c).name for c, n in counts.items() if n == 0]
    if missing:
        warnings.warn(f"no successful rollouts for {', '.join(missing)}", MissingTypeWarning, stacklevel=2)
    weight = np.array([1.0 / counts[c] for c in p])
    x = np.full((len(samples), MAX_PARAM_DIM), np.nan)
    for i, smp in enumerate(samples):
        if smp.x is not None:
            x[i, : len(smp.x)] = smp.x
    order = rng_for(seed, 0x5F).permutation(len(samples))
    log.info("IDM dataset: %d samples; per-type counts %s",
             len(samples), {PrimitiveType(c).name: n for c, n in counts.items()})
    ds = IdmDataset(
        s=np.stack([x.s for x in samples]),
        s_prime=np.stack([x.s_prime for x in samples]),
        p=p,
        x=x,
        weight=weight,
        episode=np.array([x.episode for x in samples]),
        start_states=[x.start_state for x in samples],
        end_states=[x.end_state for x in samples],
        task=task,
    )
    return ds.subset(order)


def collect_dataset(task: TaskSpec | str, cfg: CollectorConfig, workers: int = 1,
                    prim_cfg: PrimitiveConfig = DEFAULT_CONFIG) -> IdmDataset:
    if isinstance(task, str):
        task = get_task(task)
    return build_dataset(collect(task, cfg, workers, prim_cfg), cfg.seed, task.name)


def save_dataset(ds: IdmDataset, path):
    recs = [
        {"s": ds.s[i].tolist(), "s_prime": ds.s_prime[i].tolist(), "p": int(ds.p[i]),
         "x": None if ds.p[i] == PrimitiveType.OTHER else ds.x[i][~np.isnan(ds.x[i])].tolist(),
         "weight": float(ds.weight[i]), "episode": int(ds.episode[i])}
        for i in range(len(ds))
    ]
    write_records(path, "idm-dataset", recs, task=ds.task, feature_dim=ds.feature_dim)
    if ds.start_states:
        side = [{"start": a.to_dict(), "end": b.to_dict()} for a, b in zip(ds.start_states, ds.end_states)]
        write_records(str(path) + ".states", "idm-states", side)


def load_dataset(path, with_states: bool = False) -> IdmDataset:
    from pathlib import Path

    header, recs = read_records(path, kind="idm-dataset")
    d = header["feature_dim"]
    n = len(recs)
    x = np.full((n, MAX_PARAM_DIM), np.nan)
    for i, r in enumerate(recs):
        if r["x"] is not None:
            x[i, : len(r["x"])] = r["x"]
    ds = IdmDataset(
        s=np.array([r["s"] for r in recs], dtype=float).reshape(n, d),
        s_prime=np.array([r["s_prime"] for r in recs], dtype=float).reshape(n, d),
        p=np.array([r["p"] for r in recs], dtype=int),
        x=x,
        weight=np.array([r["weight"] for r in recs], dtype=float),
        episode=np.array([r["episode"] for r in recs], dtype=int),
        task=header.get("task", ""),
    )
    side = Path(str(path) + ".states")
    if with_states and side.exists():
        _, srecs = read_records(side, kind="idm-states")
        ds.start_states = [WorldState.from_dict(r["start"]) for r in srecs]
        ds.end_states = [WorldState.from_dict(r["end"]) for r in srecs]
    return ds
