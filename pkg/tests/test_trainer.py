import dataclasses
import io
import json

import numpy as np
import pytest

from mseb import audio, model, tensorcore as tc, trainer
from mseb.errors import DimensionError, FormatError, NumericsError, TrainingDiverged


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _one_param(value):
    return {"p": tc.parameter(np.array(value, dtype=np.float64))}


def test_sgd_step():
    params = _one_param([1.0])
    cfg = trainer.TrainConfig(optimizer="sgd", learning_rate=0.1)
    trainer.optimizer_step(params, {"p": np.array([2.0])}, {}, cfg)
    assert params["p"].data[0] == pytest.approx(0.8)


def test_sgd_zero_gradient_no_change():
    params = _one_param([3.0])
    cfg = trainer.TrainConfig(optimizer="sgd", learning_rate=0.5)
    trainer.optimizer_step(params, {"p": np.zeros(1)}, {}, cfg)
    assert params["p"].data[0] == 3.0


def test_adam_first_step_magnitude_is_lr():
    """Bias-corrected Adam: first update is lr * g / (|g| + eps) ~ lr * sign(g)."""
    for g in (0.003, -7.0, 120.0):
        params = _one_param([1.0])
        cfg = trainer.TrainConfig(optimizer="adam", learning_rate=1e-3)
        trainer.optimizer_step(params, {"p": np.array([g])}, {}, cfg)
        delta = params["p"].data[0] - 1.0
        assert abs(delta) == pytest.approx(1e-3, rel=1e-4)
        assert np.sign(delta) == -np.sign(g)


def test_adam_zero_gradient_state_only():
    params = _one_param([2.0])
    cfg = trainer.TrainConfig(optimizer="adam")
    state = trainer.optimizer_step(params, {"p": np.zeros(1)}, {}, cfg)
    assert params["p"].data[0] == 2.0
    assert state["p"]["t"] == 1


def test_optimizer_rejects_nan_gradient():
    params = _one_param([1.0])
    cfg = trainer.TrainConfig()
    with pytest.raises(NumericsError):
        trainer.optimizer_step(params, {"p": np.array([np.nan])}, {}, cfg)


def test_optimizer_rejects_shape_mismatch():
    params = _one_param([1.0, 2.0])
    with pytest.raises(DimensionError):
        trainer.optimizer_step(params, {"p": np.zeros(3)}, {}, trainer.TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        trainer.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        trainer.TrainConfig(loss_mode="bogus")
    with pytest.raises(ValueError):
        trainer.TrainConfig(ratio_db_range=(5.0, -5.0))
    with pytest.raises(ValueError):
        trainer.TrainConfig(augment_prob=1.5)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _dummy_checkpoint():
    rng = np.random.default_rng(0)
    return trainer.Checkpoint(
        kind="teacher",
        params={"encoder.w": rng.normal(size=(3, 4)).astype(np.float32), "head.weight": rng.normal(size=(4, 2))},
        config={"encoder": {"mel_bins": 24}, "note": "x"},
        epoch=7,
        rng_state=np.random.default_rng(5).bit_generator.state,
        metrics=[{"epoch": 1, "loss": 0.5}],
    )


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ckpt = _dummy_checkpoint()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    trainer.save_checkpoint(ckpt, p1)
    loaded = trainer.load_checkpoint(p1)
    trainer.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name, arr in ckpt.params.items():
        assert np.array_equal(loaded.params[name], arr)
        assert loaded.params[name].dtype == arr.dtype
    assert loaded.epoch == 7
    assert loaded.rng_state == trainer._json_sanitize(ckpt.rng_state)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE1" + b"\x00" * 32)
    with pytest.raises(FormatError):
        trainer.load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    ckpt = _dummy_checkpoint()
    p = tmp_path / "a.ckpt"
    trainer.save_checkpoint(ckpt, p)
    blob = p.read_bytes()
    for cut in (3, 7, len(blob) // 2, len(blob) - 5):
        p.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            trainer.load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    ckpt = _dummy_checkpoint()
    p = tmp_path / "a.ckpt"
    trainer.save_checkpoint(ckpt, p)
    blob = bytearray(p.read_bytes())
    import struct

    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9 : 9 + hlen].decode())
    header["format_version"] = 99
    new_header = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(bytes(blob[:5]) + struct.pack("<I", len(new_header)) + new_header + bytes(blob[9 + hlen :]))
    with pytest.raises(FormatError):
        trainer.load_checkpoint(p)


def test_checkpoint_config_tamper_warns(tmp_path):
    ckpt = _dummy_checkpoint()
    p = tmp_path / "a.ckpt"
    trainer.save_checkpoint(ckpt, p)
    blob = bytearray(p.read_bytes())
    import struct

    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9 : 9 + hlen].decode())
    header["config"]["note"] = "tampered"
    new_header = json.dumps(header, sort_keys=True).encode()
    p.write_bytes(bytes(blob[:5]) + struct.pack("<I", len(new_header)) + new_header + bytes(blob[9 + hlen :]))
    with pytest.warns(UserWarning, match="config hash mismatch"):
        trainer.load_checkpoint(p)


# ---------------------------------------------------------------------------
# training loops (tiny corpora)
# ---------------------------------------------------------------------------

ENC_CFG = model.EncoderConfig(mel_bins=24, channels=12, n_blocks=1, embedding_dim=8, kernel_width=3)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = audio.CorpusConfig(n_speakers=3, utterances_per_speaker=6, duration_s=0.8, train_speakers=2)
    return audio.build_corpus(cfg, seed=11, out_dir=out)


@pytest.fixture(scope="module")
def tiny_teacher(tiny_corpus):
    cfg = trainer.TrainConfig(epochs=8, batch_size=4, augment_prob=0.2, seed=3)
    return trainer.train_teacher(tiny_corpus, ENC_CFG, cfg)


def test_teacher_smoke_two_speakers_accuracy(tmp_path):
    """Desk-scale regression threshold: 2 speakers x 10 utts, 30 epochs -> acc >= 0.95."""
    cfg = audio.CorpusConfig(n_speakers=3, utterances_per_speaker=10, duration_s=0.8, train_speakers=2)
    manifest = audio.build_corpus(cfg, seed=5, out_dir=tmp_path)
    tcfg = trainer.TrainConfig(epochs=30, batch_size=4, augment_prob=0.2, seed=0)
    ckpt = trainer.train_teacher(manifest, ENC_CFG, tcfg)
    assert ckpt.metrics[-1]["accuracy"] >= 0.95


def test_teacher_deterministic(tiny_corpus, tmp_path):
    cfg = trainer.TrainConfig(epochs=2, batch_size=4, augment_prob=0.3, seed=9)
    a = trainer.train_teacher(tiny_corpus, ENC_CFG, cfg)
    b = trainer.train_teacher(tiny_corpus, ENC_CFG, cfg)
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    trainer.save_checkpoint(a, pa)
    trainer.save_checkpoint(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_teacher_lr_zero_leaves_params_unchanged(tiny_corpus):
    cfg = trainer.TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, augment_prob=0.0, seed=1)
    ckpt = trainer.train_teacher(tiny_corpus, ENC_CFG, cfg)
    enc_cfg = trainer.encoder_config_from_dict(ckpt.config["encoder"])
    fresh = model.Encoder.create(enc_cfg)
    for name, p in fresh.params.items():
        assert np.array_equal(ckpt.params[f"encoder.{name}"], p.data)


def test_teacher_needs_two_speakers(tmp_path):
    cfg = audio.CorpusConfig(n_speakers=2, utterances_per_speaker=2, duration_s=0.5, train_speakers=1)
    manifest = audio.build_corpus(cfg, seed=2, out_dir=tmp_path)
    with pytest.raises(DimensionError):
        trainer.train_teacher(manifest, ENC_CFG, trainer.TrainConfig(epochs=1))


def test_teacher_writes_log_and_checkpoint(tiny_corpus, tmp_path):
    out = tmp_path / "run"
    cfg = trainer.TrainConfig(epochs=2, batch_size=4, seed=4)
    trainer.train_teacher(tiny_corpus, ENC_CFG, cfg, out_dir=out)
    lines = (out / "train_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    entry = json.loads(lines[0])
    assert set(entry) == {"epoch", "loss", "accuracy"}
    loaded = trainer.load_checkpoint(out / "teacher.ckpt")
    assert loaded.kind == "teacher"


def _student_cfg(**kw):
    base = dict(epochs=2, batch_size=4, loss_mode="ts_tpit", augment_prob=0.0, target_refresh_epoch=2, seed=7)
    base.update(kw)
    return trainer.TrainConfig(**base)


def test_student_trains_and_freezes_teacher(tiny_corpus, tiny_teacher):
    before = trainer.params_hash(tiny_teacher.params)
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2)
    ckpt = trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg())
    assert trainer.params_hash(tiny_teacher.params) == before
    assert ckpt.kind == "student"
    assert ckpt.config["teacher_hash"] == before
    assert len(ckpt.metrics) == 2


def test_student_deterministic(tiny_corpus, tiny_teacher, tmp_path):
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2)
    a = trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg(augment_prob=0.5))
    b = trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg(augment_prob=0.5))
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    trainer.save_checkpoint(a, pa)
    trainer.save_checkpoint(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


@pytest.mark.parametrize("mode", ["ts_upit", "aam_pit_tpit", "aam_pit_upit"])
def test_student_other_loss_modes_run(tiny_corpus, tiny_teacher, mode):
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2)
    ckpt = trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg(loss_mode=mode, epochs=1))
    assert np.isfinite(ckpt.metrics[-1]["loss"])
    if mode.startswith("aam_pit"):
        assert "head.weight" in ckpt.params


def test_student_utterance_level_flag_runs(tiny_corpus, tiny_teacher):
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2)
    ckpt = trainer.train_student(
        tiny_teacher, tiny_corpus, s_cfg, _student_cfg(loss_level="utterance", epochs=1)
    )
    assert np.isfinite(ckpt.metrics[-1]["loss"])


def test_student_embedding_dim_mismatch(tiny_corpus, tiny_teacher):
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2, embedding_dim=4)
    with pytest.raises(DimensionError):
        trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg())


def test_student_rejects_plain_aam_mode(tiny_corpus, tiny_teacher):
    s_cfg = dataclasses.replace(ENC_CFG, n_outputs=2)
    with pytest.raises(ValueError):
        trainer.train_student(tiny_teacher, tiny_corpus, s_cfg, _student_cfg(loss_mode="aam"))


def test_target_provider_schedule(tiny_corpus, tiny_teacher):
    teacher, _, frontend = trainer.teacher_from_checkpoint(tiny_teacher)
    records = tiny_corpus.split("train")
    cache = trainer.compute_teacher_targets(teacher, frontend, tiny_corpus, records)
    by_speaker = {}
    for rec in records:
        by_speaker.setdefault(rec.speaker_ids[0], []).append(rec.utterance_id)
    provider = trainer.TargetProvider(
        lambda utt, factor: cache[utt], by_speaker, refresh_epoch=3, rng=np.random.default_rng(0)
    )

    rec = records[0]
    # before the refresh epoch: target is the embedding of the exact utterance
    got = provider.get(rec.utterance_id, rec.speaker_ids[0], epoch=2)
    feats = frontend.features(tiny_corpus.load_waveform(rec.utterance_id))
    fresh, _ = model.teacher_forward(teacher, feats)
    cos = float(np.dot(got, fresh.vector) / (np.linalg.norm(got) * np.linalg.norm(fresh.vector)))
    assert cos == pytest.approx(1.0, abs=1e-7)

    # from the refresh epoch on: a different utterance of the same speaker
    refreshed = [provider.get(rec.utterance_id, rec.speaker_ids[0], epoch=3) for _ in range(8)]
    assert any(not np.array_equal(r, cache[rec.utterance_id]) for r in refreshed)
    for r in refreshed:
        assert any(np.array_equal(r, cache[u]) for u in by_speaker[rec.speaker_ids[0]])


def test_training_diverged_carries_state(tiny_corpus):
    # a step this large overflows float32 activations on the next forward pass
    cfg = trainer.TrainConfig(epochs=2, batch_size=2, learning_rate=1e30, optimizer="sgd", augment_prob=0.0, seed=0)
    with pytest.raises(TrainingDiverged) as exc:
        trainer.train_teacher(tiny_corpus, ENC_CFG, cfg)
    assert exc.value.checkpoint is not None
    assert exc.value.checkpoint.kind == "teacher"


def test_loss_monotonicity_smoke(tiny_corpus, tiny_teacher):
    """Median batch loss over the last 10% of steps < median over the first 10%."""
    for ckpt in (
        tiny_teacher,
        trainer.train_student(
            tiny_teacher,
            tiny_corpus,
            dataclasses.replace(ENC_CFG, n_outputs=2),
            _student_cfg(epochs=6),
        ),
    ):
        steps = [v for m in ckpt.metrics for v in m["batch_losses"]]
        n = max(1, len(steps) // 10)
        assert np.median(steps[-n:]) < np.median(steps[:n])
