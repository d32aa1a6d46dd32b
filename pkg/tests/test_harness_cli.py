import json

import numpy as np
import pytest

from primil.cli import main
from primil.harness import (ABLATIONS, ChecksumMismatch, ExperimentConfig, MetricsReport, METRIC_COLUMNS,
                            load_run_report, read_report, report, verify_manifest)
from primil.world import ConfigError

SMALL = {"task": "PickPlaceLite", "demos": 3, "seeds": [0, 1],
         "collector": {"episodes": 120}, "idm_classifier": {"epochs": 3}, "idm_params": {"epochs": 3},
         "policy_pretrain": {"epochs": 2}, "policy_finetune": {"epochs": 3}, "bc": {"epochs": 2},
         "eval_episodes": 3, "bc_max_steps": 60, "stride": 4}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--config", str(small_cfg), "--out", str(out)]) == 0
    return out


def _fake_report():
    rng = np.random.default_rng(0)
    per_seed = [{c: float(rng.uniform()) for c in METRIC_COLUMNS} for _ in range(3)]
    abl = {"full": [0.9, 1.0, 0.8], "no_pretrain": [0.5, 0.6, 0.7]}
    return MetricsReport("PickPlaceLite", [0, 1, 2], per_seed, abl, {"parse": 1.5})


@pytest.mark.parametrize("bad", [{"seeds": []}, {"seeds": [1, 1]}, {"task": "Nope"}, {"alpha": 0.0},
                                 {"ablations": ["no_idm"]}, {"collector": {"episodes": 0}}, {"bogus": 1}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_roundtrip():
    cfg = ExperimentConfig.from_dict(SMALL)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.collector_config().episodes == 120
    assert ExperimentConfig(task="TidyUpLite").collector_config().horizon == 30


def test_report_roundtrip_and_aggregates(tmp_path):
    rep = _fake_report()
    report(rep, tmp_path)
    back = read_report(tmp_path)
    assert back.seeds == rep.seeds
    for a, b in zip(back.per_seed, rep.per_seed):
        for c in METRIC_COLUMNS:
            assert abs(a[c] - b[c]) <= 1e-9 * max(1.0, abs(b[c]))
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "seed" and rows[-2].startswith("mean,") and rows[-1].startswith("std,")
    mean_row = dict(zip(rows[0].split(","), rows[-2].split(",")))
    for c in METRIC_COLUMNS:
        assert abs(float(mean_row[c]) - np.mean(rep.column(c))) < 1e-9
    assert np.allclose(back.ablation_aggregate()["full"], (0.9, np.std([0.9, 1.0, 0.8])))
    assert json.loads((tmp_path / "timings.json").read_text()) == {"parse": 1.5}
    assert len(list(tmp_path.glob("plot_*.csv"))) == len(METRIC_COLUMNS)


def test_run_outputs(small_run):
    rep = load_run_report(small_run)
    assert rep.seeds == [0, 1]
    names = [l.split(",")[0] for l in (small_run / "ablations.csv").read_text().splitlines()[1:]]
    assert names == ["full", "no_pretrain", "greedy_parse"]
    for r in rep.per_seed:
        assert abs(r["compression"] - r["mean_seq_len"] / r["mean_demo_len"]) < 1e-9
        assert 0.0 <= r["policy_success"] <= 1.0
    for s in (0, 1):
        for f in ("demos.rec", "parsed.rec", "policy_full.rec", "policy_bc.rec"):
            assert (small_run / f"seed_{s}" / f).exists()


def test_manifest_tamper(small_run, tmp_path):
    import shutil

    verify_manifest(small_run)
    copy = tmp_path / "copy"
    shutil.copytree(small_run, copy)
    with (copy / "seed_0" / "parsed.rec").open("ab") as f:
        f.write(b"x")
    with pytest.raises(ChecksumMismatch):
        verify_manifest(copy)
    assert main(["report", "--run", str(copy)]) == 1


def test_report_subcommand(small_run, tmp_path):
    assert main(["report", "--run", str(small_run), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_text() == (small_run / "metrics.csv").read_text()


def test_run_all_is_reproducible(small_run, small_cfg, tmp_path):
    assert main(["run-all", "--config", str(small_cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (small_run / "metrics.csv").read_bytes()
    assert (tmp_path / "ablations.csv").read_bytes() == (small_run / "ablations.csv").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["collect-demos", "--task", "Nope", "--out", str(tmp_path / "d.rec")]) == 2
    assert main(["parse"]) == 2  # missing required flags
    assert main(["replay", "--parsed", str(tmp_path / "missing.rec"),
                 "--demos", str(tmp_path / "missing.rec")]) == 1
    (tmp_path / "bad.json").write_text('{"seeds": []}')
    assert main(["run-all", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r")]) == 2


def test_cli_stagewise(tmp_path, small_cfg, capsys):
    d = tmp_path
    common = ["--config", str(small_cfg)]
    assert main(["collect", *common, "--episodes", "80", "--out", str(d / "data.rec")]) == 0
    assert main(["train-idm", *common, "--data", str(d / "data.rec"), "--epochs", "2",
                 "--out", str(d / "idm.rec")]) == 0
    assert main(["collect-demos", *common, "--n", "2", "--out", str(d / "demos.rec")]) == 0
    assert main(["parse", *common, "--demos", str(d / "demos.rec"), "--model", str(d / "idm.rec"),
                 "--out", str(d / "parsed.rec")]) == 0
    assert main(["replay", "--parsed", str(d / "parsed.rec"), "--demos", str(d / "demos.rec"),
                 "--report", str(d / "replay.json")]) == 0
    assert 0.0 <= json.loads((d / "replay.json").read_text())["replay_success"] <= 1.0
    assert main(["train-policy", *common, "--parsed", str(d / "parsed.rec"), "--demos", str(d / "demos.rec"),
                 "--idm", str(d / "idm.rec"), "--no-pretrain", "--out", str(d / "pol.rec")]) == 0
    capsys.readouterr()
    assert main(["eval", *common, "--policy", str(d / "pol.rec"), "--episodes", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["episodes"] == 2
    assert main(["train-policy", *common, "--parsed", str(d / "parsed.rec"), "--demos", str(d / "demos.rec"),
                 "--no-augment", "--out", str(d / "pol2.rec")]) == 2  # pretraining needs --idm-data


def test_ablation_names():
    assert ABLATIONS[:2] == ("no_pretrain", "greedy_parse")
