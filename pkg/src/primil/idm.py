"""Factorized inverse dynamics model.

``IDM(p, x | s, s') = IDM_prim(p | s, s') * IDM_param(x | s, s', p)``

The type factor is a :class:`~primil.nn.Classifier` over Reach, Grasp, Place,
Push and Other; each library primitive has its own
:class:`~primil.nn.MixtureModel` for the parameters. Inputs are the
concatenated features of the start and end state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collector import IdmDataset
from .nn import (
    Classifier,
    DimensionMismatch,
    MixtureModel,
    TrainConfig,
    fit_model,
    model_from_record,
    model_to_record,
)
from .primitives import CLASSES, LIBRARY, N_CLASSES, PrimitiveType, param_dim
from .records import read_records, write_records

DEFAULT_COMPONENTS = 5
DEFAULT_HIDDEN = (64, 64)


@dataclass
class IdmModels:
    classifier: Classifier
    param_models: dict  # PrimitiveType -> MixtureModel
    feature_dim: int
    n_components: int = DEFAULT_COMPONENTS
    task: str = ""
    curves: dict = field(default_factory=dict)


@dataclass
class IdmScores:
    log_prim: np.ndarray  # (N, C) class log-probabilities
    log_score: np.ndarray  # (N, C) log_prim + beta * log q(x*)
    x_star: dict  # PrimitiveType -> (N, D_p)
    log_q: dict  # PrimitiveType -> (N,)


def _split(data: IdmDataset, cfg: TrainConfig):
    if cfg.val_fraction > 0:
        return data.split(cfg.val_fraction, cfg.seed)
    return data, None


def train_primitive_idm(data: IdmDataset, cfg: TrainConfig, hidden=DEFAULT_HIDDEN):
    """Weighted cross-entropy training of the type classifier; returns (model, result)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    present = np.zeros(N_CLASSES, bool)
    present[np.unique(data.p)] = True
    if present.sum() < 2:
        raise ValueError("need at least two primitive classes to train a classifier")
    train, val = _split(data, cfg)
    X = np.hstack([train.s, train.s_prime])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed % (1 << 64), 0x1D])))
    model = Classifier.create(X.shape[1], N_CLASSES, hidden, rng, X=X, class_mask=present)
    kw = {}
    if val is not None and len(val):
        kw = dict(X_val=np.hstack([val.s, val.s_prime]), T_val=val.p, w_val=val.weight)
    res = fit_model(model, X, train.p, train.weight, cfg, **kw)
    return model, res


def train_param_idm(data: IdmDataset, p, cfg: TrainConfig, n_components=DEFAULT_COMPONENTS,
                    hidden=DEFAULT_HIDDEN):
    """Mixture-density regression of the parameters of primitive ``p``; returns (model, result)."""
    p = PrimitiveType(p)
    sub = data.subset(np.flatnonzero(data.p == int(p)))
    if len(sub) == 0:
        raise ValueError(f"no {p.name} samples to train on")
    train, val = _split(sub, cfg)
    X, Y, _ = train.params_for(p)
    w = np.ones(len(X))  # one primitive type: the class weight is a constant
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed % (1 << 64), 0x2D, int(p)])))
    model = MixtureModel.create(X.shape[1], param_dim(p), n_components, hidden, rng, X=X, Y=Y)
    kw = {}
    if val is not None and len(val):
        Xv, Yv, _ = val.params_for(p)
        kw = dict(X_val=Xv, T_val=Yv, w_val=np.ones(len(Xv)))
    res = fit_model(model, X, Y, w, cfg, **kw)
    return model, res


def train_idm(data: IdmDataset, cls_cfg: TrainConfig, param_cfg: TrainConfig | None = None,
              n_components=DEFAULT_COMPONENTS, hidden=DEFAULT_HIDDEN) -> IdmModels:
    param_cfg = param_cfg or cls_cfg
    clf, res = train_primitive_idm(data, cls_cfg, hidden)
    curves = {"classifier": res.curve}
    params = {}
    for p in LIBRARY:
        if np.any(data.p == int(p)):
            params[p], r = train_param_idm(data, p, param_cfg, n_components, hidden)
            curves[p.name] = r.curve
    return IdmModels(clf, params, data.feature_dim, n_components, data.task, curves)


def idm_score(models: IdmModels, s_feat, s2_feat, beta: float = 0.0, with_params: bool = True) -> IdmScores:
    """Score every class for each (s, s') row.

    ``log_score[:, p] = log IDM_prim(p | s, s') + beta * log q(x*(p))`` where
    ``x*(p)`` is the mixture mode of the parameter model. Other has no
    parameters, so its score is the class log-probability alone.
    """
    s_feat = np.atleast_2d(np.asarray(s_feat, float))
    s2_feat = np.atleast_2d(np.asarray(s2_feat, float))
    d = models.feature_dim
    if s_feat.shape[1] != d or s2_feat.shape[1] != d:
        raise DimensionMismatch(f"model expects {d} state features, got {s_feat.shape[1]} and {s2_feat.shape[1]}")
    X = np.hstack([s_feat, s2_feat])
    log_prim = models.classifier.log_probs(X)
    log_score = log_prim.copy()
    x_star, log_q = {}, {}
    if with_params or beta != 0.0:
        for p in LIBRARY:
            m = models.param_models.get(p)
            if m is None:
                log_score[:, int(p)] = -np.inf
                continue
            x_star[p], log_q[p] = m.mode(X)
            if beta != 0.0:
                log_score[:, int(p)] += beta * log_q[p]
    return IdmScores(log_prim, log_score, x_star, log_q)


def best_library_action(models: IdmModels, s_feat, s2_feat, beta: float = 0.0):
    """argmax over library primitives (Other excluded) with the mixture-mode parameters."""
    sc = idm_score(models, s_feat, s2_feat, beta)
    lib = sc.log_score[:, [int(p) for p in LIBRARY]]
    best = np.argmax(lib, axis=1)
    ps = [LIBRARY[b] for b in best]
    xs = [sc.x_star[p][i] if p in sc.x_star else None for i, p in enumerate(ps)]
    return ps, xs, lib[np.arange(len(best)), best]


def classification_accuracy(models: IdmModels, data: IdmDataset) -> float:
    pred = models.classifier.predict(np.hstack([data.s, data.s_prime]))
    return float(np.mean(pred == data.p))


def save_model(models: IdmModels, path):
    recs = [{"role": "classifier", **model_to_record(models.classifier)}]
    for p, m in sorted(models.param_models.items()):
        recs.append({"role": "param", "primitive": PrimitiveType(p).name, **model_to_record(m)})
    return write_records(path, "idm-model", recs, feature_dim=models.feature_dim,
                         n_components=models.n_components, task=models.task,
                         classes=[PrimitiveType(c).name for c in CLASSES])


def load_model(path) -> IdmModels:
    header, recs = read_records(path, kind="idm-model")
    clf, params = None, {}
    for r in recs:
        if r["role"] == "classifier":
            clf = model_from_record(r)
        else:
            params[PrimitiveType[r["primitive"]]] = model_from_record(r)
    return IdmModels(clf, params, header["feature_dim"], header["n_components"], header.get("task", ""))
