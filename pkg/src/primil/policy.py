"""Two-level imitation policy and the flat behavioral-cloning baseline.

The primitive policy maps a state to a distribution over the library types
(Other is masked out of its softmax); the parameter policy holds one mixture
density network per type. Training data come from parsed demonstrations,
optionally enriched by stepwise augmentation, on top of a pretraining pass
over the positive samples of the IDM dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .collector import IdmDataset, featurize, featurize_many
from .idm import DEFAULT_COMPONENTS, DEFAULT_HIDDEN, IdmModels, best_library_action
from .nn import Classifier, MixtureModel, TrainConfig, fit_model, model_from_record, model_to_record
from .primitives import LIBRARY, N_CLASSES, PrimitiveType, execute_primitive, param_dim
from .records import read_records, write_records
from .world import MotorAction, TaskSpec, get_task, reset, rng_for, step, task_success

log = logging.getLogger(__name__)

ACTION_DIM = 5
SOURCES = ("parsed", "augmented", "pretrain")


@dataclass
class PolicyTuple:
    s_feat: np.ndarray
    p: PrimitiveType
    x: np.ndarray
    source: str = "parsed"
    target: int = -1  # segment end the tuple was labelled against

    def __post_init__(self):
        self.p = PrimitiveType(self.p)
        if self.p not in LIBRARY:
            raise ValueError(f"policy tuples must carry a library primitive, got {self.p.name}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown tuple source {self.source!r}")


@dataclass
class PrimitivePolicy:
    model: Classifier

    def probs(self, s_feat) -> np.ndarray:
        return np.exp(self.model.log_probs(s_feat))

    def act(self, s_feat, rng=None) -> PrimitiveType:
        pr = self.probs(s_feat)[0]
        if rng is None:
            return PrimitiveType(int(np.argmax(pr)))
        return PrimitiveType(int(rng.choice(N_CLASSES, p=pr / pr.sum())))


@dataclass
class ParameterPolicy:
    models: dict  # PrimitiveType -> MixtureModel

    def act(self, s_feat, p, rng=None) -> np.ndarray:
        m = self.models[PrimitiveType(p)]
        if rng is None:
            return m.mode(s_feat)[0][0]
        return m.sample(s_feat, rng)[0]


@dataclass
class Policies:
    prim: PrimitivePolicy
    param: ParameterPolicy
    feature_dim: int
    curves: dict = field(default_factory=dict)


@dataclass
class EpisodeResult:
    success: bool
    primitives_executed: int
    trace: list = field(default_factory=list)  # (type, params, held before, held after)


def _rng(seed, *tag):
    return rng_for(seed % (1 << 63), *tag)


# ------------------------------------------------------------------ augmentation


def parsed_tuples(parsed, demo) -> list:
    """One tuple per library segment: its start state, type and parameters."""
    F = featurize_many(demo.states)
    return [PolicyTuple(F[seg.t_start], seg.p, np.asarray(seg.x, float), "parsed", seg.t_end)
            for seg in parsed.segments if seg.p != PrimitiveType.OTHER]


def augment_stepwise(parsed, demo, models: IdmModels, beta: float = 0.0, stats: dict | None = None) -> list:
    """Relabel every interior state of each segment against that segment's end.

    For ``t_d < l < t_{d+1}`` the tuple is ``(s_l, p', x')`` with ``(p', x')``
    the IDM argmax over library primitives for the pair
    ``(s_l, s_{t_{d+1}})``. Other segments carry no executable label and are
    skipped.
    """
    F = featurize_many(demo.states)
    out = []
    agree = total = 0
    for seg in parsed.segments:
        if seg.p == PrimitiveType.OTHER:
            continue
        ls = np.arange(seg.t_start + 1, seg.t_end)
        if len(ls) == 0:
            continue
        ends = np.broadcast_to(F[seg.t_end], (len(ls), F.shape[1]))
        ps, xs, _ = best_library_action(models, F[ls], ends, beta)
        for l, p, x in zip(ls, ps, xs):
            out.append(PolicyTuple(F[l], p, np.asarray(x, float), "augmented", seg.t_end))
            agree += p == seg.p
            total += 1
    if stats is not None:
        stats["augmented"] = stats.get("augmented", 0) + total
        stats["agree"] = stats.get("agree", 0) + agree
    return out


# ------------------------------------------------------------------ training


def _new_prim(d, hidden, seed, X):
    mask = np.zeros(N_CLASSES, bool)
    mask[[int(p) for p in LIBRARY]] = True
    return Classifier.create(d, N_CLASSES, hidden, _rng(seed, 0x71), X=X, class_mask=mask)


def _new_param(d, p, n_components, hidden, seed, X, Y):
    return MixtureModel.create(d, param_dim(p), n_components, hidden, _rng(seed, 0x72, int(p)), X=X, Y=Y)


def pretrain_policy(idm_data: IdmDataset, cfg: TrainConfig, hidden=DEFAULT_HIDDEN,
                    n_components=DEFAULT_COMPONENTS) -> Policies:
    """Fit both policy levels on the start states of the IDM positives."""
    pos = idm_data.subset(np.flatnonzero(idm_data.p != int(PrimitiveType.OTHER)))
    if len(pos) == 0:
        raise ValueError("IDM dataset has no positive samples")
    d = pos.feature_dim
    prim = _new_prim(d, hidden, cfg.seed, pos.s)
    curves = {"prim": fit_model(prim, pos.s, pos.p, pos.weight, cfg).curve}
    params = {}
    for p in LIBRARY:
        m = pos.p == int(p)
        if not m.any():
            continue
        X, Y = pos.s[m], pos.x[m, : param_dim(p)]
        params[p] = _new_param(d, p, n_components, hidden, cfg.seed, X, Y)
        curves[p.name] = fit_model(params[p], X, Y, np.ones(len(X)), cfg).curve
    return Policies(PrimitivePolicy(prim), ParameterPolicy(params), d, curves)


def _copy(model):
    return model_from_record(model_to_record(model))


def finetune_policy(init: Policies | None, tuples: list, cfg: TrainConfig, hidden=DEFAULT_HIDDEN,
                    n_components=DEFAULT_COMPONENTS) -> Policies:
    """Continue training on parsed (and augmented) tuples with uniform weights.

    With ``init=None`` the networks start from scratch, which is the
    no-pretraining ablation.
    """
    if not tuples:
        raise ValueError("no policy tuples to train on")
    X = np.stack([t.s_feat for t in tuples])
    y = np.array([int(t.p) for t in tuples])
    d = X.shape[1]
    prim = _copy(init.prim.model) if init is not None else _new_prim(d, hidden, cfg.seed, X)
    curves = {"prim": fit_model(prim, X, y, np.ones(len(y)), cfg).curve}
    params = {p: _copy(m) for p, m in init.param.models.items()} if init is not None else {}
    for p in LIBRARY:
        m = y == int(p)
        if not m.any():
            continue
        Xp = X[m]
        Yp = np.stack([t.x for t, k in zip(tuples, m) if k])
        if p not in params:
            params[p] = _new_param(d, p, n_components, hidden, cfg.seed, Xp, Yp)
        curves[p.name] = fit_model(params[p], Xp, Yp, np.ones(len(Xp)), cfg).curve
    missing = [p for p in LIBRARY if p not in params]
    if missing:
        # a type with no data anywhere can never be chosen
        prim.class_mask = prim.class_mask.copy()
        prim.class_mask[[int(p) for p in missing]] = False
    return Policies(PrimitivePolicy(prim), ParameterPolicy(params), d, curves)


# ------------------------------------------------------------------ rollout


def rollout_policy(policies: Policies, task: TaskSpec | str, seed: int, max_prims: int = 8,
                   mode: str = "mode-select") -> EpisodeResult:
    if max_prims < 1:
        raise ValueError("max_prims must be >= 1")
    if mode not in ("mode-select", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    task = get_task(task) if isinstance(task, str) else task
    rng = _rng(seed, 0xE7) if mode == "sample" else None
    s = reset(task, seed)
    trace = []
    for k in range(max_prims):
        f = featurize(s, len(task.objects))[None]
        p = policies.prim.act(f, rng)
        x = policies.param.act(f, p, rng)
        s2 = execute_primitive(s, p, x).final_state
        trace.append((p, x, s.held, s2.held))
        s = s2
        if task_success(s, task):
            return EpisodeResult(True, k + 1, trace)
    return EpisodeResult(False, max_prims, trace)


def grasp_retry_rate(results) -> tuple:
    """How often a failed grasp is followed by another grasp: (retries, failed grasps)."""
    retries = fails = 0
    for r in results:
        for a, b in zip(r.trace, r.trace[1:]):
            if a[0] == PrimitiveType.GRASP and a[3] is None:
                fails += 1
                retries += b[0] == PrimitiveType.GRASP
    return retries, fails


# ------------------------------------------------------------------ flat BC


@dataclass
class FlatBcPolicy:
    model: MixtureModel
    feature_dim: int
    curve: list = field(default_factory=list)

    def act(self, s_feat) -> MotorAction:
        v = self.model.mode(s_feat)[0][0]
        return MotorAction.from_vector(v)  # clamps into the action bounds


def train_bc_baseline(demos, cfg: TrainConfig, hidden=DEFAULT_HIDDEN,
                      n_components=DEFAULT_COMPONENTS) -> FlatBcPolicy:
    """Mixture-density behavioral cloning on every (state, motor action) frame."""
    if not demos:
        raise ValueError("no demonstrations")
    X = np.concatenate([featurize_many([s for s, _ in d.frames]) for d in demos])
    Y = np.concatenate([np.stack([a.to_vector() for _, a in d.frames]) for d in demos])
    model = MixtureModel.create(X.shape[1], ACTION_DIM, n_components, hidden, _rng(cfg.seed, 0xBC), X=X, Y=Y)
    res = fit_model(model, X, Y, np.ones(len(X)), cfg)
    return FlatBcPolicy(model, X.shape[1], res.curve)


def rollout_bc(policy: FlatBcPolicy, task: TaskSpec | str, seed: int, max_steps: int = 1000) -> EpisodeResult:
    task = get_task(task) if isinstance(task, str) else task
    s = reset(task, seed)
    for k in range(max_steps):
        s = step(s, policy.act(featurize(s, len(task.objects))[None]))
        if task_success(s, task):
            return EpisodeResult(True, k + 1)
    return EpisodeResult(False, max_steps)


# ------------------------------------------------------------------ checkpoints


def save_policy(pol, path, **header):
    """Write a two-level policy or a flat BC policy to the shared model container."""
    if isinstance(pol, FlatBcPolicy):
        recs = [{"role": "bc", **model_to_record(pol.model)}]
        return write_records(path, "policy", recs, policy="flat-bc", feature_dim=pol.feature_dim, **header)
    recs = [{"role": "prim", **model_to_record(pol.prim.model)}]
    for p, m in sorted(pol.param.models.items()):
        recs.append({"role": "param", "primitive": PrimitiveType(p).name, **model_to_record(m)})
    return write_records(path, "policy", recs, policy="two-level", feature_dim=pol.feature_dim, **header)


def load_policy(path):
    header, recs = read_records(path, kind="policy")
    if header["policy"] == "flat-bc":
        return FlatBcPolicy(model_from_record(recs[0]), header["feature_dim"])
    prim, params = None, {}
    for r in recs:
        if r["role"] == "prim":
            prim = model_from_record(r)
        else:
            params[PrimitiveType[r["primitive"]]] = model_from_record(r)
    return Policies(PrimitivePolicy(prim), ParameterPolicy(params), header["feature_dim"])
