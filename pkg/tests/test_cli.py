import filecmp
import json
import os
from pathlib import Path

import pytest

from mseb import cli
from mseb.errors import ConfigError

TINY = {
    "seed": 0,
    "audio": {"duration_s": 0.8, "n_speakers": 8, "utterances_per_speaker": 4, "train_speakers": 4},
    "model": {"channels": 12, "n_blocks": 1, "embedding_dim": 8, "kernel_width": 3},
    "training": {
        "teacher": {"epochs": 3, "batch_size": 4, "augment_prob": 0.0},
        "student": {"epochs": 2, "batch_size": 4, "augment_prob": 0.0, "target_refresh_epoch": 2},
    },
    "trials": {"n_trials": 16},
    "reproduce": {"seeds": [0], "crosstalk_examples": 8},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _tree(root):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_config_defaults_roundtrip():
    cfg = cli.RunConfig()
    again = cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        cli.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="typo"):
        cli.RunConfig.from_dict({"audio": {"typo": 2}})
    with pytest.raises(ConfigError, match="lr"):
        cli.RunConfig.from_dict({"training": {"teacher": {"lr": 0.1}}})
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"training": {"tutor": {}}})


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"training": {"teacher": {"loss_mode": "nope"}}})


def test_config_seed_override(tiny_config):
    cfg = cli.RunConfig.load(tiny_config, seed_override=77)
    assert cfg.seed == 77


def test_config_missing_file():
    with pytest.raises(ConfigError):
        cli.RunConfig.load("/nonexistent/path.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_config):
    """Run the full CLI pipeline once; individual tests inspect the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus"
    assert cli.main(["synth", "--config", tiny_config, "--out", str(corpus)]) == 0
    teach = root / "teacher"
    assert cli.main([
        "train-teacher", "--config", tiny_config, "--corpus", str(corpus / "manifest.jsonl"), "--out", str(teach)
    ]) == 0
    stud = root / "student"
    assert cli.main([
        "train-student", "--config", tiny_config, "--corpus", str(corpus / "manifest.jsonl"),
        "--teacher", str(teach / "teacher.ckpt"), "--out", str(stud), "--loss-mode", "ts_tpit",
    ]) == 0
    trials = root / "trials"
    assert cli.main([
        "trials", "--config", tiny_config, "--manifest", str(corpus / "manifest.jsonl"),
        "--scenario", "mvm", "--out", str(trials),
    ]) == 0
    report = root / "report.json"
    assert cli.main([
        "eval", "--config", tiny_config, "--trials", str(trials / "trials_mvm.txt"),
        "--manifest", str(corpus / "manifest.jsonl"), "--teacher", str(teach / "teacher.ckpt"),
        "--student", str(stud / "student.ckpt"), "--mode", "any_spk", "--out", str(report),
    ]) == 0
    return root, tiny_config


def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    assert (root / "corpus" / "manifest.jsonl").exists()
    assert (root / "corpus" / "config.echo.json").exists()
    assert (root / "teacher" / "train_log.jsonl").exists()
    report = json.loads((root / "report.json").read_text())
    assert report["scenario"] == "mvm"
    assert report["mode"] == "any_spk"
    assert 0.0 <= report["eer"] <= 1.0
    assert report["config"]["audio"]["n_speakers"] == 8
    echoed = json.loads((root / "corpus" / "config.echo.json").read_text())
    assert echoed == cli.RunConfig.load(pipeline[1]).to_dict()


def test_synth_deterministic_trees(tiny_config, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert cli.main(["synth", "--config", tiny_config, "--out", str(a)]) == 0
    assert cli.main(["synth", "--config", tiny_config, "--out", str(b)]) == 0
    ta, tb = _tree(a), _tree(b)
    assert ta.keys() == tb.keys()
    assert all(ta[k] == tb[k] for k in ta)


def test_eval_empty_trials_errors(pipeline, tmp_path, capsys):
    root, tiny_config = pipeline
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    rc = cli.main([
        "eval", "--config", tiny_config, "--trials", str(empty),
        "--manifest", str(root / "corpus" / "manifest.jsonl"),
        "--teacher", str(root / "teacher" / "teacher.ckpt"),
        "--out", str(tmp_path / "r.json"),
    ])
    assert rc != 0
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert "\n" not in err.strip()


def test_eval_missing_student_for_mixtures_errors(pipeline, tmp_path):
    root, tiny_config = pipeline
    rc = cli.main([
        "eval", "--config", tiny_config, "--trials", str(root / "trials" / "trials_mvm.txt"),
        "--manifest", str(root / "corpus" / "manifest.jsonl"),
        "--teacher", str(root / "teacher" / "teacher.ckpt"),
        "--out", str(tmp_path / "r.json"),
    ])
    assert rc != 0


def test_eval_teacher_on_mixture_flag(pipeline, tmp_path):
    root, tiny_config = pipeline
    out = tmp_path / "tt.json"
    rc = cli.main([
        "eval", "--config", tiny_config, "--trials", str(root / "trials" / "trials_mvm.txt"),
        "--manifest", str(root / "corpus" / "manifest.jsonl"),
        "--teacher", str(root / "teacher" / "teacher.ckpt"),
        "--teacher-on-mixture", "--mode", "any_spk", "--out", str(out),
    ])
    assert rc == 0
    assert json.loads(out.read_text())["teacher_on_mixture"] is True


def test_unknown_config_key_fails_cleanly(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"audio": {"sample_rat": 8000}}))
    rc = cli.main(["synth", "--config", str(bad), "--out", str(tmp_path / "c")])
    assert rc != 0
    assert "error: ConfigError" in capsys.readouterr().err


def test_cli_reports_are_deterministic(pipeline, tmp_path):
    root, tiny_config = pipeline
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    for out in (out1, out2):
        rc = cli.main([
            "eval", "--config", tiny_config, "--trials", str(root / "trials" / "trials_mvm.txt"),
            "--manifest", str(root / "corpus" / "manifest.jsonl"),
            "--teacher", str(root / "teacher" / "teacher.ckpt"),
            "--student", str(root / "student" / "student.ckpt"), "--out", str(out),
        ])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_render_table2_markdown_structure():
    results = {
        "seeds": [0],
        "modes": {
            m: {"mean_eer": 0.3, "mean_min_dcf": 0.9, "mean_per_spk_eer": 0.25, "seeds": {}}
            for m in ("ts_tpit", "ts_upit", "aam_pit_tpit", "aam_pit_upit")
        },
        "checks": [{"name": "x", "passed": True, "detail": "0.1 < 0.2"}],
    }
    from mseb._repro import render_table2

    md = render_table2(results)
    assert "| teacher-student | tPIT |" in md
    assert "[PASS] x" in md
    assert "paper" not in md.lower()
