"""Command line entry point: ``primil <subcommand>`` (or ``python -m primil``).

Exit codes: 0 on success, 1 when a stage fails, 2 on a configuration error.
Every subcommand accepts ``--config FILE`` (JSON, keys of
:class:`~primil.harness.ExperimentConfig`); explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .world import ConfigError

log = logging.getLogger("primil")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _base_config(args):
    from .harness import ExperimentConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else None
    d = cfg.to_dict() if cfg is not None else {}
    for key, attr in (("task", "task"), ("demos", "n_demos"), ("alpha", "alpha"), ("stride", "stride"),
                      ("eval_episodes", "episodes_eval"), ("demo_noise", "noise")):
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    if getattr(args, "seeds", None) is not None:
        d["seeds"] = args.seeds
    return ExperimentConfig.from_dict(d) if d else ExperimentConfig()


def _dump(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=float))


# ------------------------------------------------------------------ commands


def cmd_collect(args):
    import dataclasses

    from .collector import collect_dataset, save_dataset

    cfg = _base_config(args)
    cc = dataclasses.asdict(cfg.collector_config())
    for k, a in (("episodes", "episodes"), ("horizon", "horizon"), ("negatives", "negatives"),
                 ("prior_mode", "prior"), ("seed", "seed")):
        if getattr(args, a) is not None:
            cc[k] = getattr(args, a)
    from .collector import CollectorConfig

    try:
        ccfg = CollectorConfig(**cc)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    ds = collect_dataset(cfg.task, ccfg, workers=args.workers)
    save_dataset(ds, args.out)
    _dump({"samples": len(ds), "counts": ds.counts(), "out": str(args.out)})


def cmd_collect_demos(args):
    from .demos import script_demo, save_demos

    cfg = _base_config(args)
    seed = args.seed or 0
    demos = [script_demo(cfg.task, seed + k, cfg.demo_noise) for k in range(cfg.demos)]
    save_demos(demos, args.out)
    _dump({"demos": len(demos), "mean_length": float(np.mean([len(d) for d in demos])), "out": str(args.out)})


def cmd_train_idm(args):
    from .collector import load_dataset
    from .idm import classification_accuracy, save_model, train_idm

    cfg = _base_config(args)
    ds = load_dataset(args.data)
    train, held = ds.split(args.holdout, args.seed or 0)
    ccfg, pcfg = cfg.train_config("idm_classifier"), cfg.train_config("idm_params")
    if args.epochs is not None:
        import dataclasses

        ccfg = dataclasses.replace(ccfg, epochs=args.epochs)
        pcfg = dataclasses.replace(pcfg, epochs=args.epochs)
    models = train_idm(train, ccfg, pcfg)
    save_model(models, args.out)
    _dump({"heldout_accuracy": classification_accuracy(models, held), "out": str(args.out)})


def cmd_parse(args):
    from .demos import load_demos
    from .idm import load_model
    from .parser import parse_dp, parse_greedy, save_parsed

    cfg = _base_config(args)
    demos = load_demos(args.demos)
    models = load_model(args.idm)
    fn = parse_greedy if args.greedy else parse_dp
    parsed = [fn(d, models, cfg.alpha, cfg.stride, cfg.beta) for d in demos]
    save_parsed(parsed, args.out)
    _dump({"parsed": len(parsed), "mean_seq_len": float(np.mean([len(q) for q in parsed])), "out": str(args.out)})


def cmd_replay(args):
    from .demos import load_demos
    from .parser import load_parsed, replay

    demos = load_demos(args.demos)
    parsed = load_parsed(args.parsed)
    if len(demos) != len(parsed):
        raise ConfigError(f"{len(parsed)} parses for {len(demos)} demonstrations")
    res = [replay(q, d) for q, d in zip(parsed, demos)]
    out = {"replay_success": float(np.mean([r.success for r in res])),
           "mean_seq_len": float(np.mean([len(q) for q in parsed])),
           "mean_demo_len": float(np.mean([len(d) for d in demos])),
           "per_demo": [bool(r.success) for r in res]}
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    _dump(out)


def cmd_train_policy(args):
    from .collector import load_dataset
    from .demos import load_demos
    from .idm import load_model
    from .parser import load_parsed
    from .policy import augment_stepwise, finetune_policy, parsed_tuples, pretrain_policy, save_policy

    cfg = _base_config(args)
    seed = args.seed or 0
    demos = load_demos(args.demos)
    parsed = load_parsed(args.parsed)
    if args.augment and args.idm is None:
        raise ConfigError("--augment needs --idm")
    if args.pretrain and args.idm_data is None:
        raise ConfigError("--pretrain needs --idm-data")
    models = load_model(args.idm) if args.idm else None
    tuples = []
    for q, d in zip(parsed, demos):
        tuples += parsed_tuples(q, d)
        if args.augment:
            tuples += augment_stepwise(q, d, models, cfg.beta)
    pre = pretrain_policy(load_dataset(args.idm_data), cfg.train_config("policy_pretrain", seed)) \
        if args.pretrain else None
    pol = finetune_policy(pre, tuples, cfg.train_config("policy_finetune", seed))
    save_policy(pol, args.out, task=cfg.task)
    _dump({"tuples": len(tuples), "out": str(args.out)})


def cmd_eval(args):
    from .policy import FlatBcPolicy, load_policy, rollout_bc, rollout_policy

    cfg = _base_config(args)
    pol = load_policy(args.policy)
    n = args.episodes or cfg.eval_episodes
    seed = args.seed or 0
    if isinstance(pol, FlatBcPolicy):
        res = [rollout_bc(pol, cfg.task, seed + e, cfg.bc_max_steps) for e in range(n)]
    else:
        res = [rollout_policy(pol, cfg.task, seed + e, cfg.max_prims) for e in range(n)]
    _dump({"success": float(np.mean([r.success for r in res])), "episodes": n})


def cmd_ablate(args):
    import dataclasses

    from .harness import ABLATIONS, report, run_pipeline

    cfg = _base_config(args)
    cfg = dataclasses.replace(cfg, ablations=list(args.variants or ABLATIONS[:2]))
    rep = run_pipeline(cfg, args.out)
    report(rep, args.out)
    _dump(rep.ablation_aggregate())


def cmd_run_all(args):
    from .harness import run_pipeline

    cfg = _base_config(args)
    rep = run_pipeline(cfg, args.out)
    _dump({"aggregate": rep.aggregate(), "ablations": rep.ablation_aggregate(), "out": str(args.out)})


def cmd_report(args):
    from .harness import load_run_report, report

    rep = load_run_report(args.run)
    paths = report(rep, args.out or args.run)
    _dump({"written": [str(p) for p in paths]})


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="primil", description="Primitive-based imitation learning pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path)
        p.add_argument("--task")
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)
        return p

    p = add("collect", cmd_collect, "self-supervised IDM data collection")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--prior", choices=["uniform", "object_prior"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = add("collect-demos", cmd_collect_demos, "scripted demonstrations")
    p.add_argument("--n", dest="n_demos", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = add("train-idm", cmd_train_idm, "train the inverse dynamics model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--holdout", type=float, default=0.1)
    p.add_argument("--out", type=Path, required=True)

    p = add("parse", cmd_parse, "segment demonstrations into primitives")
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--idm", "--model", dest="idm", type=Path, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--out", type=Path, required=True)

    p = add("replay", cmd_replay, "execute parsed sequences from the demo start states")
    p.add_argument("--parsed", type=Path, required=True)
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--report", type=Path, help="also write the result as JSON here")

    p = add("train-policy", cmd_train_policy, "pretrain and fine-tune the two-level policy")
    p.add_argument("--parsed", type=Path, required=True)
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--idm-data", type=Path)
    p.add_argument("--idm", type=Path)
    p.add_argument("--pretrain", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", type=Path, required=True)

    p = add("eval", cmd_eval, "roll out a policy checkpoint")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--episodes", type=int)

    p = add("ablate", cmd_ablate, "full pipeline plus ablation variants")
    p.add_argument("--variants", nargs="+", choices=["no_pretrain", "greedy_parse", "no_augment"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out", type=Path, required=True)

    p = add("run-all", cmd_run_all, "every stage, writing a run directory")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--n-demos", dest="n_demos", type=int)
    p.add_argument("--eval-episodes", dest="episodes_eval", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = add("report", cmd_report, "re-emit metric tables from a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path)
    return ap


def main(argv=None) -> int:
    from .harness import ChecksumMismatch, StageError
    from .records import CorruptFile, VersionMismatch

    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 1
    except (OSError, CorruptFile, VersionMismatch, ChecksumMismatch, ValueError, RuntimeError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
