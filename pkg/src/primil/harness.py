"""Experiment orchestration: the full collect -> IDM -> parse -> policy -> eval chain.

Every run lives in one directory holding the resolved configuration, every
intermediate artifact, a manifest with a checksum for each file, the
deterministic metric tables and a separate ``timings.json`` (wall-clock times
are the only run-to-run varying output, so they stay out of the tables).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collector import CollectorConfig, collect_dataset, load_dataset, save_dataset
from .demos import script_demo, save_demos
from .idm import classification_accuracy, save_model, train_idm
from .nn import TrainConfig
from .parser import DEFAULT_ALPHA, parse_dp, parse_greedy, replay, save_parsed
from .policy import (
    augment_stepwise,
    finetune_policy,
    grasp_retry_rate,
    parsed_tuples,
    pretrain_policy,
    rollout_bc,
    rollout_policy,
    save_policy,
    train_bc_baseline,
)
from .records import file_sha256
from .world import ConfigError, TASKS

log = logging.getLogger(__name__)

ABLATIONS = ("no_pretrain", "greedy_parse", "no_augment")

# Collection budget per domain: (episodes, horizon). The multi-object domain
# needs longer episodes so that states with objects already moved (boxes on
# the mat, discs in bins) show up in the IDM training data.
DOMAIN_COLLECTOR = {"PickPlaceLite": (2000, 15), "TidyUpLite": (4000, 30)}

METRIC_COLUMNS = (
    "parse_replay_success",
    "mean_seq_len",
    "mean_demo_len",
    "compression",
    "policy_success",
    "baseline_success",
    "idm_heldout_accuracy",
    "augment_agreement",
    "grasp_retry_rate",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ChecksumMismatch(RuntimeError):
    pass


def _train_cfg(d, **defaults) -> TrainConfig:
    merged = {**defaults, **(d or {})}
    try:
        return TrainConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from e


@dataclass
class ExperimentConfig:
    task: str = "PickPlaceLite"
    demos: int = 30
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    demo_noise: float = 0.1
    collector: dict = field(default_factory=dict)
    idm_classifier: dict = field(default_factory=dict)
    idm_params: dict = field(default_factory=dict)
    holdout: float = 0.1
    policy_pretrain: dict = field(default_factory=dict)
    policy_finetune: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)
    alpha: float = DEFAULT_ALPHA
    stride: int = 1
    beta: float = 0.0
    eval_episodes: int = 50
    max_prims: int = 8
    bc_max_steps: int = 1000
    ablations: list = field(default_factory=lambda: ["no_pretrain", "greedy_parse"])
    run_baseline: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not isinstance(self.seeds, (list, tuple)) or len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.demos < 1:
            raise ConfigError("demo count must be >= 1")
        if self.eval_episodes < 1 or self.max_prims < 1 or self.bc_max_steps < 1:
            raise ConfigError("eval_episodes, max_prims and bc_max_steps must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must lie in (0, 1)")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablations {bad}; choose from {ABLATIONS}")
        self.ablations = list(self.ablations)
        # validate nested configs eagerly so errors surface as config errors
        self.collector_config()
        for k in ("idm_classifier", "idm_params", "policy_pretrain", "policy_finetune", "bc"):
            self.train_config(k)

    # ---- resolved sub-configs

    def collector_config(self) -> CollectorConfig:
        ep, hz = DOMAIN_COLLECTOR.get(self.task, (2000, 15))
        d = {"episodes": ep, "horizon": hz, **self.collector}
        try:
            return CollectorConfig(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"collector: {e}") from e

    def train_config(self, key: str, seed: int = 0) -> TrainConfig:
        defaults = {
            "idm_classifier": dict(epochs=60, batch_size=256),
            "idm_params": dict(epochs=150, batch_size=128, min_steps=6000),
            "policy_pretrain": dict(epochs=20, batch_size=256),
            "policy_finetune": dict(epochs=60, batch_size=128),
            "bc": dict(epochs=60, batch_size=128),
        }[key]
        cfg = _train_cfg(getattr(self, key), **defaults)
        return dataclasses.replace(cfg, seed=cfg.seed + seed) if seed else cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["collector"] = dataclasses.asdict(self.collector_config())
        for k in ("idm_classifier", "idm_params", "policy_pretrain", "policy_finetune", "bc"):
            d[k] = dataclasses.asdict(self.train_config(k))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError("config file must hold a JSON object")
    return ExperimentConfig.from_dict(d)


def demo_seed(seed: int, k: int) -> int:
    return 10_000 * (seed + 1) + k


def eval_seed(seed: int, e: int) -> int:
    return 10_000 * (seed + 1) + 5_000 + e


# ------------------------------------------------------------------ manifest


class Manifest:
    """Checksums of every file a run reads or writes."""

    def __init__(self, root):
        self.root = Path(root)
        self.entries = {}

    def add(self, path, role: str):
        p = Path(path)
        rel = Path(os.path.relpath(p, self.root)).as_posix()
        self.entries[rel] = {"role": role, "sha256": file_sha256(p)}
        return p

    def write(self):
        path = self.root / "manifest.json"
        path.write_text(json.dumps({"files": self.entries}, indent=1, sort_keys=True) + "\n")
        return path


def verify_manifest(run_dir) -> dict:
    """Recompute every checksum listed in ``run_dir/manifest.json``."""
    run_dir = Path(run_dir)
    files = json.loads((run_dir / "manifest.json").read_text())["files"]
    for rel, e in files.items():
        p = run_dir / rel
        if not p.exists():
            raise ChecksumMismatch(f"{rel} listed in the manifest is missing")
        if file_sha256(p) != e["sha256"]:
            raise ChecksumMismatch(f"{rel} does not match its manifest checksum")
    return files


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    task: str
    seeds: list
    per_seed: list  # one dict per seed, keys from METRIC_COLUMNS
    ablations: dict  # variant -> list of per-seed success rates
    timings: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.per_seed], float)

    def aggregate(self) -> dict:
        """Mean and (population) standard deviation over seeds for every metric."""
        out = {}
        for c in METRIC_COLUMNS:
            v = self.column(c)
            v = v[~np.isnan(v)]
            out[c] = (float(np.mean(v)), float(np.std(v))) if len(v) else (math.nan, math.nan)
        return out

    def ablation_aggregate(self) -> dict:
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in self.ablations.items()}


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else format(v, ".10g")


def report(rep: MetricsReport, out_dir) -> list:
    """Write ``metrics.csv``, ``ablations.csv``, one ``plot_<metric>.csv`` per
    metric and ``timings.json``. Returns the written paths.

    ``metrics.csv`` columns: ``seed`` then the metric columns; one row per seed
    followed by ``mean`` and ``std`` rows. ``ablations.csv`` columns:
    ``variant``, ``seed_<n>`` per seed, ``mean``, ``std``. Plot files have
    columns ``x`` (seed) and ``y`` (value).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    agg = rep.aggregate()
    p = out / "metrics.csv"
    with p.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", *METRIC_COLUMNS])
        for s, r in zip(rep.seeds, rep.per_seed):
            w.writerow([s, *(_fmt(r[c]) for c in METRIC_COLUMNS)])
        w.writerow(["mean", *(_fmt(agg[c][0]) for c in METRIC_COLUMNS)])
        w.writerow(["std", *(_fmt(agg[c][1]) for c in METRIC_COLUMNS)])
    written.append(p)
    p = out / "ablations.csv"
    with p.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant", *(f"seed_{s}" for s in rep.seeds), "mean", "std"])
        for k, (m, sd) in rep.ablation_aggregate().items():
            w.writerow([k, *(_fmt(v) for v in rep.ablations[k]), _fmt(m), _fmt(sd)])
    written.append(p)
    for c in METRIC_COLUMNS:
        p = out / f"plot_{c}.csv"
        with p.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "y"])
            for s, r in zip(rep.seeds, rep.per_seed):
                w.writerow([s, _fmt(r[c])])
        written.append(p)
    p = out / "timings.json"
    p.write_text(json.dumps(rep.timings, indent=1, sort_keys=True) + "\n")
    written.append(p)
    return written


def read_report(out_dir) -> MetricsReport:
    """Inverse of :func:`report` (task name is not part of the tables)."""
    out = Path(out_dir)
    with (out / "metrics.csv").open() as f:
        rows = list(csv.DictReader(f))
    per_seed, seeds = [], []
    for r in rows:
        if r["seed"] in ("mean", "std"):
            continue
        seeds.append(int(r["seed"]))
        per_seed.append({c: float(r[c]) for c in METRIC_COLUMNS})
    abl = {}
    with (out / "ablations.csv").open() as f:
        for r in csv.DictReader(f):
            abl[r["variant"]] = [float(r[f"seed_{s}"]) for s in seeds]
    timings = {}
    if (out / "timings.json").exists():
        timings = json.loads((out / "timings.json").read_text())
    return MetricsReport("", seeds, per_seed, abl, timings)


# ------------------------------------------------------------------ pipeline


class _Clock:
    def __init__(self):
        self.t = {}

    def __call__(self, key, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        except (KeyboardInterrupt, ConfigError):
            raise
        except Exception as e:  # label the failing stage
            raise StageError(key.split(":")[0], e) from e
        finally:
            self.t[key] = self.t.get(key, 0.0) + time.perf_counter() - t0


def _parse_all(demos, models, cfg, greedy=False):
    fn = parse_greedy if greedy else parse_dp
    return [fn(d, models, cfg.alpha, cfg.stride, cfg.beta) for d in demos]


def _tuples(parsed, demos, models, cfg, augment=True, stats=None):
    out = []
    for q, d in zip(parsed, demos):
        out += parsed_tuples(q, d)
        if augment:
            out += augment_stepwise(q, d, models, cfg.beta, stats)
    return out


def _success(policies, cfg, seed):
    res = [rollout_policy(policies, cfg.task, eval_seed(seed, e), cfg.max_prims) for e in range(cfg.eval_episodes)]
    return float(np.mean([r.success for r in res])), res


def run_pipeline(cfg: ExperimentConfig, run_dir) -> MetricsReport:
    """Run every stage and write all artifacts under ``run_dir``."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    man = Manifest(run)
    clock = _Clock()
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    man.add(run / "config.json", "config")

    ccfg = cfg.collector_config()
    data = clock("collect", collect_dataset, cfg.task, ccfg)
    clock("collect", save_dataset, data, run / "idm_data.rec")
    man.add(run / "idm_data.rec", "idm-dataset")
    man.add(run / "idm_data.rec.states", "idm-states")
    train, held = data.split(cfg.holdout, ccfg.seed)
    models = clock("train-idm", train_idm, train, cfg.train_config("idm_classifier"), cfg.train_config("idm_params"))
    clock("train-idm", save_model, models, run / "idm_model.rec")
    man.add(run / "idm_model.rec", "idm-model")
    acc = classification_accuracy(models, held)

    per_seed = []
    abl = {"full": [], **{a: [] for a in cfg.ablations}}
    for seed in cfg.seeds:
        sd = run / f"seed_{seed}"
        sd.mkdir(exist_ok=True)
        demos = clock("collect-demos", lambda: [script_demo(cfg.task, demo_seed(seed, k), cfg.demo_noise)
                                                 for k in range(cfg.demos)])
        save_demos(demos, sd / "demos.rec")
        man.add(sd / "demos.rec", "demos")
        parsed = clock("parse", _parse_all, demos, models, cfg)
        save_parsed(parsed, sd / "parsed.rec")
        man.add(sd / "parsed.rec", "parsed")
        reps = clock("replay", lambda: [replay(q, d) for q, d in zip(parsed, demos)])
        seq_len = float(np.mean([len(q) for q in parsed]))
        demo_len = float(np.mean([len(d) for d in demos]))

        stats = {}
        tuples = clock("augment", _tuples, parsed, demos, models, cfg, True, stats)
        pre = clock("train-policy", pretrain_policy, data, cfg.train_config("policy_pretrain", seed))
        ft_cfg = cfg.train_config("policy_finetune", seed)
        full = clock("train-policy", finetune_policy, pre, tuples, ft_cfg)
        save_policy(full, sd / "policy_full.rec", variant="full", task=cfg.task)
        man.add(sd / "policy_full.rec", "policy")
        succ, results = clock("eval", _success, full, cfg, seed)
        abl["full"].append(succ)
        retries, fails = grasp_retry_rate(results)

        for a in cfg.ablations:
            if a == "no_pretrain":
                pol = clock("ablate", finetune_policy, None, tuples, ft_cfg)
            elif a == "no_augment":
                pol = clock("ablate", finetune_policy, pre, _tuples(parsed, demos, models, cfg, False), ft_cfg)
            else:
                g = clock("ablate", _parse_all, demos, models, cfg, True)
                save_parsed(g, sd / "parsed_greedy.rec")
                man.add(sd / "parsed_greedy.rec", "parsed")
                pol = clock("ablate", finetune_policy, pre, _tuples(g, demos, models, cfg), ft_cfg)
            save_policy(pol, sd / f"policy_{a}.rec", variant=a, task=cfg.task)
            man.add(sd / f"policy_{a}.rec", "policy")
            abl[a].append(clock("eval", _success, pol, cfg, seed)[0])

        base = math.nan
        if cfg.run_baseline:
            bc = clock("baseline", train_bc_baseline, demos, cfg.train_config("bc", seed))
            save_policy(bc, sd / "policy_bc.rec", variant="flat-bc", task=cfg.task)
            man.add(sd / "policy_bc.rec", "policy")
            base = clock("eval", lambda: float(np.mean(
                [rollout_bc(bc, cfg.task, eval_seed(seed, e), cfg.bc_max_steps).success
                 for e in range(cfg.eval_episodes)])))

        per_seed.append({
            "parse_replay_success": float(np.mean([r.success for r in reps])),
            "mean_seq_len": seq_len,
            "mean_demo_len": demo_len,
            "compression": seq_len / demo_len,
            "policy_success": succ,
            "baseline_success": base,
            "idm_heldout_accuracy": acc,
            "augment_agreement": stats["agree"] / stats["augmented"] if stats.get("augmented") else math.nan,
            "grasp_retry_rate": retries / fails if fails else math.nan,
        })
        log.info("seed %d: %s", seed, per_seed[-1])

    rep = MetricsReport(cfg.task, list(cfg.seeds), per_seed, abl, {k: round(v, 3) for k, v in clock.t.items()})
    (run / "report.json").write_text(json.dumps(
        {"task": rep.task, "seeds": rep.seeds, "per_seed": rep.per_seed, "ablations": rep.ablations},
        indent=1, sort_keys=True) + "\n")
    man.add(run / "report.json", "report")
    for p in report(rep, run):
        if p.name != "timings.json":
            man.add(p, "table")
    man.write()
    return rep


def load_run_report(run_dir) -> MetricsReport:
    """Rebuild the report of a finished run after checking its manifest."""
    run_dir = Path(run_dir)
    verify_manifest(run_dir)
    d = json.loads((run_dir / "report.json").read_text())
    timings = {}
    if (run_dir / "timings.json").exists():
        timings = json.loads((run_dir / "timings.json").read_text())
    return MetricsReport(d["task"], d["seeds"], d["per_seed"], d["ablations"], timings)


def held_out_accuracy(run_dir, cfg: ExperimentConfig | None = None) -> float:
    """Re-evaluate the stored IDM on the held-out split of the stored dataset."""
    from .idm import load_model

    run_dir = Path(run_dir)
    cfg = cfg or load_config(run_dir / "config.json")
    data = load_dataset(run_dir / "idm_data.rec")
    _, held = data.split(cfg.holdout, cfg.collector_config().seed)
    return classification_accuracy(load_model(run_dir / "idm_model.rec"), held)
