import json

import pytest

from cfad.cli import ConfigError, merge_config, main

TINY = {"synth.nodes": 8, "synth.n_train": 600, "synth.n_test_normal": 200, "synth.n_test_anomaly": 40,
        "synth.pool_size": 4000, "synth.batch_size": 4000, "gae.inner_steps": 30, "gae.max_outer": 20,
        "gae.refit_steps": 50, "detector.pretrain_epochs": 3, "detector.finetune_epochs": 1}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "runs"
    assert main(["pipeline", "--config", str(cfg), "--out", str(out), "--seed", "1", "--sweep"]) == 0
    return cfg, out, out / "seed_1"


def test_pipeline_artifacts(tiny):
    _, _, run = tiny
    for name in ("train.csv", "test.csv", "train_cf_true.csv", "test_cf_true.csv", "benchmark.json",
                 "scm.json", "train_cf.csv", "test_cf.csv", "manifest.json"):
        assert (run / name).exists(), name
    for v in ("ae", "cfad"):
        rep = json.loads((run / v / "report.json").read_text())
        for key in ("auc_pr", "auc_roc", "macro_f1", "changing_ratio", "q", "tau", "sweep"):
            assert key in rep
        assert rep["reference"] == "truth"
        assert rep["meta"]["seed"] == 1
        header = (run / v / "scores.csv").read_text().splitlines()[1]
        assert header == "sample_id,group,score,score_cf,pred,pred_cf"
        assert len((run / v / "sweep.csv").read_text().splitlines()) == 2 + 9


def test_synth_is_byte_identical_on_rerun(tiny, tmp_path):
    cfg, _, run = tiny
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1"]) == 0
    for name in ("train.csv", "test.csv", "test_cf_true.csv", "benchmark.json"):
        assert (tmp_path / "seed_1" / name).read_bytes() == (run / name).read_bytes()


def test_eval_rerun_is_identical(tiny):
    cfg, out, run = tiny
    before = (run / "cfad" / "scores.csv").read_bytes()
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--seed", "1"]) == 0
    assert (run / "cfad" / "scores.csv").read_bytes() == before


def test_no_finetune_trains_baseline_only(tiny, tmp_path):
    cfg, _, _ = tiny
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path), "--seed", "1", "--no-finetune"]) == 0
    assert (tmp_path / "seed_1" / "ae" / "report.json").exists()
    assert not (tmp_path / "seed_1" / "cfad").exists()


def test_exit_codes(tiny, tmp_path, capsys):
    cfg, _, _ = tiny
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path), "--set", "synth.edge_prob=1.5"]) == 2
    assert "edge_prob" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path), "--set", "no.such=1"]) == 2
    assert main(["discover", "--out", str(tmp_path), "--set", "gae.restarts=0"]) == 2
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 4
    assert main(["cf", "--out", str(tmp_path / "empty")]) == 4


def test_merge_precedence_and_types():
    cfg = merge_config({"seed": 3, "eval.quantile": 0.9}, {"seed": 4})
    assert cfg["seed"] == 4 and cfg["eval.quantile"] == 0.9
    with pytest.raises(ConfigError):
        merge_config({"detector.pretrain_epochs": 2.5}, None)
    with pytest.raises(ConfigError):
        merge_config(None, {"finetune": "yes"})
