"""Optimization loops, checkpointing, and the target-refresh schedule.

Teacher training minimizes the AAM-softmax classification loss on clean
(optionally noise-augmented) utterances. Student training freezes the teacher,
mixes two distinct-speaker utterances per example at a random power ratio
(min mode, resampled pairings every epoch), and minimizes the configured loss
on the mixture's frame embeddings. From ``target_refresh_epoch`` on (1-based),
targets switch to teacher embeddings of *different* utterances of the same
speakers.

Determinism contract: (corpus, config, seed) fully determines the resulting
checkpoint bytes. All randomness flows from one seeded generator; a NaN loss
aborts with the partial state attached rather than clamping silently.

Checkpoint file format ("MSEB1"): 5-byte magic, uint32 little-endian header
length, JSON header (format version, config snapshot + hash, epoch, RNG
state, metric history, tensor directory), then raw little-endian tensor data
in sorted-name order. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .audio import CorpusManifest, FrontEnd, add_noise, mix_signals, resample_speed
from .errors import DimensionError, FormatError, NumericsError, TrainingDiverged
from .losses import AamHead, aam_loss, aam_pit_loss, ts_loss_tpit, ts_loss_upit, ts_loss_utterance
from .model import CONV_CONVENTION, SLOT_LAYOUT, Encoder, EncoderConfig, encode_frames, local_tap, tap

CHECKPOINT_MAGIC = b"MSEB1"
FORMAT_VERSION = 1

LOSS_MODES = ("aam", "ts_tpit", "ts_upit", "aam_pit_tpit", "aam_pit_upit")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_warmup_steps: int = 0
    loss_mode: str = "aam"
    loss_level: str = "frame"  # "utterance" reproduces the known negative result
    target_refresh_epoch: int = 10
    ratio_db_range: tuple = (-5.0, 5.0)
    augment_prob: float = 0.3
    noise_snr_range: tuple = (5.0, 25.0)
    noise_color: str = "white"
    speed_perturb: tuple = ()  # resampling factors; each (speaker, factor) is its own class
    aam_scale: float = 30.0
    aam_margin: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.loss_level not in ("frame", "utterance"):
            raise ValueError(f"loss_level must be 'frame' or 'utterance', got {self.loss_level!r}")
        if not self.ratio_db_range[0] <= self.ratio_db_range[1]:
            raise ValueError(f"ratio_db_range must be ordered, got {self.ratio_db_range}")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError(f"augment_prob must be in [0, 1], got {self.augment_prob}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ratio_db_range"] = list(self.ratio_db_range)
        d["noise_snr_range"] = list(self.noise_snr_range)
        d["speed_perturb"] = list(self.speed_perturb)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["ratio_db_range"] = tuple(d.get("ratio_db_range", (-5.0, 5.0)))
        d["noise_snr_range"] = tuple(d.get("noise_snr_range", (5.0, 25.0)))
        d["speed_perturb"] = tuple(d.get("speed_perturb", ()))
        return cls(**d)


@dataclass
class Checkpoint:
    kind: str
    params: dict  # name -> np.ndarray
    config: dict  # JSON-able snapshot
    epoch: int
    rng_state: dict
    metrics: list = field(default_factory=list)


def _derive(seed, *tags):
    digest = hashlib.sha256(":".join([str(seed), *map(str, tags)]).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _json_sanitize(obj):
    if isinstance(obj, dict):
        return {k: _json_sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_sanitize(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def config_hash(config: dict) -> str:
    blob = json.dumps(_json_sanitize(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def optimizer_step(params: dict, grads: dict, state: dict, cfg: TrainConfig) -> dict:
    """Apply one SGD/Adam update in place; returns the updated state."""
    state.setdefault("step", 0)
    state["step"] += 1
    lr = cfg.learning_rate
    if cfg.lr_warmup_steps > 0:
        lr *= min(1.0, state["step"] / cfg.lr_warmup_steps)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        if cfg.optimizer == "sgd":
            p.data = p.data - p.data.dtype.type(lr) * g
        else:
            st = state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0})
            st["t"] += 1
            b1, b2 = cfg.adam_beta1, cfg.adam_beta2
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
            m_hat = st["m"] / (1.0 - b1 ** st["t"])
            v_hat = st["v"] / (1.0 - b2 ** st["t"])
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoint serialization (MSEB1)
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path):
    names = sorted(ckpt.params)
    directory = {}
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        directory[name] = {
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": _json_sanitize(ckpt.config),
        "config_hash": config_hash(ckpt.config),
        "epoch": ckpt.epoch,
        "rng_state": _json_sanitize(ckpt.rng_state),
        "metrics": _json_sanitize(ckpt.metrics),
        "tensors": directory,
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an MSEB1 checkpoint")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9 : 9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    data = raw[9 + hlen :]
    params = {}
    for name, meta in header["tensors"].items():
        lo, hi = meta["offset"], meta["offset"] + meta["nbytes"]
        if hi > len(data):
            raise FormatError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()
        params[name] = arr
    if config_hash(header["config"]) != header.get("config_hash"):
        warnings.warn(f"{path}: checkpoint config hash mismatch (file may have been altered)")
    return Checkpoint(
        kind=header["kind"],
        params=params,
        config=header["config"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        metrics=header["metrics"],
    )


def encoder_config_from_dict(d) -> EncoderConfig:
    return EncoderConfig(**d)


def teacher_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the frozen teacher encoder plus its label table and front-end."""
    cfg = encoder_config_from_dict(ckpt.config["encoder"])
    arrays = {n[len("encoder."):]: a for n, a in ckpt.params.items() if n.startswith("encoder.")}
    enc = Encoder.from_arrays(cfg, arrays, trainable=False)
    frontend = FrontEnd(**ckpt.config["frontend"])
    return enc, list(ckpt.config.get("labels", [])), frontend


def student_from_checkpoint(ckpt: Checkpoint) -> Encoder:
    cfg = encoder_config_from_dict(ckpt.config["encoder"])
    arrays = {n[len("encoder."):]: a for n, a in ckpt.params.items() if n.startswith("encoder.")}
    return Encoder.from_arrays(cfg, arrays, trainable=False)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

class _Batcher:
    """Accumulates per-example gradients and steps the optimizer."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.state = {}
        self.count = 0

    def zero(self):
        for p in self.params.values():
            p.grad = None
        self.count = 0

    def add_example(self):
        self.count += 1

    def step_if_ready(self, force=False):
        if self.count == 0 or (self.count < self.cfg.batch_size and not force):
            return
        grads = {}
        for name, p in self.params.items():
            if p.grad is not None:
                grads[name] = p.grad / self.count
        optimizer_step(self.params, grads, self.state, self.cfg)
        self.zero()


def _epoch_log(out_dir, entry):
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train_log.jsonl", "a") as fh:
        fh.write(json.dumps(_json_sanitize(entry), sort_keys=True) + "\n")


def _waveform_cache(manifest):
    cache = {}

    def get(utt_id):
        if utt_id not in cache:
            cache[utt_id] = manifest.load_waveform(utt_id)
        return cache[utt_id]

    return get


def _maybe_augment(wav, cfg, rng):
    if cfg.augment_prob > 0.0 and rng.random() < cfg.augment_prob:
        snr = float(rng.uniform(*cfg.noise_snr_range))
        return add_noise(wav, snr, seed=int(rng.integers(2**63)), color=cfg.noise_color)
    return wav


class _DivergenceGuard:
    """Converts non-finite losses (or numerics failures mid-graph) into
    TrainingDiverged carrying a snapshot of the current state."""

    def __init__(self, make_checkpoint):
        self.make_checkpoint = make_checkpoint

    def check(self, value, epoch):
        if not np.isfinite(value):
            tc.reset_tape()
            raise TrainingDiverged(
                f"training loss became non-finite ({value}) in epoch {epoch}",
                checkpoint=self.make_checkpoint(epoch),
            )

    def run(self, epoch, fn):
        try:
            return fn()
        except NumericsError as e:
            tc.reset_tape()
            raise TrainingDiverged(
                f"training diverged in epoch {epoch}: {e}", checkpoint=self.make_checkpoint(epoch)
            ) from e


def _virtual_classes(speakers, factors):
    """Class labels: one per (speaker, resampling factor); plain when no perturb."""
    if not factors:
        return list(speakers), {(s, 1.0): i for i, s in enumerate(speakers)}
    labels = []
    index = {}
    for s in speakers:
        for f in factors:
            index[(s, float(f))] = len(labels)
            labels.append(f"{s}@x{f:g}")
    return labels, index


def train_teacher(
    manifest: CorpusManifest,
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
    frontend: FrontEnd = FrontEnd(),
    out_dir=None,
) -> Checkpoint:
    """Train the single-speaker classifier on the manifest's train split.

    With ``cfg.speed_perturb`` set, each (speaker, factor) pair is its own
    class and every epoch visits each utterance at every factor, which
    multiplies the number of training voices.
    """
    train_records = manifest.split("train")
    speakers = sorted(manifest.speakers("train"))
    if len(speakers) < 2:
        raise DimensionError(f"teacher training needs >= 2 speakers, got {len(speakers)}")
    if encoder_cfg.mel_bins != frontend.mel_bins:
        raise DimensionError("encoder mel_bins must match the front-end")
    factors = tuple(float(f) for f in cfg.speed_perturb)
    labels, label_index = _virtual_classes(speakers, factors)
    enc_cfg = dataclasses.replace(encoder_cfg, n_outputs=1, seed=_derive(cfg.seed, "teacher-encoder"))
    enc = Encoder.create(enc_cfg)
    head = AamHead.create(
        enc_cfg.embedding_dim, len(labels), seed=_derive(cfg.seed, "teacher-head"),
        scale=cfg.aam_scale, margin=cfg.aam_margin,
    )
    params = {f"encoder.{n}": p for n, p in enc.params.items()}
    params["head.weight"] = head.weights
    rng = np.random.default_rng(_derive(cfg.seed, "teacher-train"))
    load_wav = _waveform_cache(manifest)
    feature_cache = {}
    metrics = []

    def snapshot(epoch):
        arrays = {n: p.data.copy() for n, p in params.items()}
        arrays["encoder.embed_mean"] = enc.embed_mean.copy()
        return Checkpoint(
            kind="teacher",
            params=arrays,
            config={
                "encoder": enc_cfg.to_dict(),
                "train": cfg.to_dict(),
                "frontend": frontend.to_dict(),
                "labels": labels,
                "conv_convention": CONV_CONVENTION,
                "slot_layout": SLOT_LAYOUT,
            },
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            metrics=metrics,
        )

    examples = [(rec, f) for rec in train_records for f in (factors or (1.0,))]
    guard = _DivergenceGuard(snapshot)
    batcher = _Batcher(params, cfg)
    batcher.zero()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(examples))
        losses_epoch = []
        batch_losses = []
        pending = []
        correct = 0
        for idx in order:
            rec, factor = examples[int(idx)]
            key = (rec.utterance_id, factor)
            if cfg.augment_prob > 0.0 and rng.random() < cfg.augment_prob:
                wav = resample_speed(load_wav(rec.utterance_id), factor)
                snr = float(rng.uniform(*cfg.noise_snr_range))
                wav = add_noise(wav, snr, seed=int(rng.integers(2**63)), color=cfg.noise_color)
                feats = frontend.features(wav).frames
            else:
                if key not in feature_cache:
                    feature_cache[key] = frontend.features(resample_speed(load_wav(rec.utterance_id), factor)).frames
                feats = feature_cache[key]
            label = label_index[(rec.speaker_ids[0], factor)]

            def example():
                d = tc.take_row(tap(encode_frames(enc, feats)), 0)
                lv = aam_loss(d, label, head)
                tc.backward(lv.value)
                return lv.item(), d.data

            val, d_data = guard.run(epoch, example)
            guard.check(val, epoch)
            losses_epoch.append(val)
            pending.append(val)
            dn = d_data / max(np.linalg.norm(d_data), tc.EPS_NORM)
            wn = head.weights.data / np.linalg.norm(head.weights.data, axis=0)
            if int(np.argmax(dn @ wn)) == label:
                correct += 1
            batcher.add_example()
            if batcher.count >= cfg.batch_size:
                batcher.step_if_ready()
                batch_losses.append(float(np.mean(pending)))
                pending = []
        batcher.step_if_ready(force=True)
        if pending:
            batch_losses.append(float(np.mean(pending)))
        entry = {
            "epoch": epoch,
            "loss": float(np.mean(losses_epoch)),
            "accuracy": correct / len(examples),
            "batch_losses": batch_losses,
        }
        metrics.append(entry)
        _epoch_log(out_dir, {k: v for k, v in entry.items() if k != "batch_losses"})

    # estimate the training-set embedding mean for extraction-time centering
    sums = np.zeros(enc_cfg.embedding_dim)
    for rec, factor in examples:
        key = (rec.utterance_id, factor)
        if key not in feature_cache:
            feature_cache[key] = frontend.features(resample_speed(load_wav(rec.utterance_id), factor)).frames
        with tc.no_grad():
            sums += tap(encode_frames(enc, feature_cache[key])).data[0]
    enc.embed_mean = sums / len(examples)

    ckpt = snapshot(cfg.epochs)
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "teacher.ckpt")
    return ckpt


def _pair_distinct_speakers(records, rng):
    """Random disjoint pairing of utterances with distinct speakers."""
    pool = [records[int(i)] for i in rng.permutation(len(records))]
    pairs = []
    while len(pool) >= 2:
        a = pool.pop()
        j = None
        for i in range(len(pool) - 1, -1, -1):
            if pool[i].speaker_ids[0] != a.speaker_ids[0]:
                j = i
                break
        if j is None:
            break
        pairs.append((a, pool.pop(j)))
    return pairs


def teacher_embedding(teacher: Encoder, frontend: FrontEnd, wav) -> np.ndarray:
    with tc.no_grad():
        emb = tap(encode_frames(teacher, frontend.features(wav))).data[0]
    return np.asarray(emb, dtype=np.float64) - teacher.embed_mean


def compute_teacher_targets(teacher: Encoder, frontend: FrontEnd, manifest: CorpusManifest, records) -> dict:
    """Teacher embedding of each clean utterance (fixed while the teacher is frozen)."""
    return {
        rec.utterance_id: teacher_embedding(teacher, frontend, manifest.load_waveform(rec.utterance_id))
        for rec in records
    }


class TargetProvider:
    """Implements the target-refresh schedule (1-based epochs).

    Before ``refresh_epoch`` the target is the teacher embedding of the exact
    (possibly speed-perturbed) utterance that went into the mixture; from that
    epoch on it is drawn from the same speaker's other utterances at the same
    perturbation factor, so the virtual voice stays fixed while the content
    changes.
    """

    def __init__(self, embed_fn, by_speaker, refresh_epoch, rng):
        self.embed = embed_fn  # (utterance_id, factor) -> embedding
        self.by_speaker = by_speaker
        self.refresh_epoch = refresh_epoch
        self.rng = rng

    def get(self, utt_id, speaker_id, epoch, factor=1.0):
        if epoch < self.refresh_epoch:
            return self.embed(utt_id, factor)
        pool = [u for u in self.by_speaker[speaker_id] if u != utt_id]
        if not pool:
            return self.embed(utt_id, factor)
        return self.embed(pool[int(self.rng.integers(len(pool)))], factor)


def train_student(
    teacher_ckpt: Checkpoint,
    manifest: CorpusManifest,
    encoder_cfg: EncoderConfig,
    cfg: TrainConfig,
    out_dir=None,
) -> Checkpoint:
    """Train the K-slot mixture encoder against frozen-teacher targets.

    For every example two utterances of distinct train speakers are mixed at
    a ratio drawn from ``cfg.ratio_db_range``. Before the refresh epoch the
    targets are the teacher embeddings of the exact mixed utterances;
    afterwards they come from different utterances of the same speakers.
    """
    teacher, _, frontend = teacher_from_checkpoint(teacher_ckpt)
    if encoder_cfg.embedding_dim != teacher.config.embedding_dim:
        raise DimensionError(
            f"student embedding_dim {encoder_cfg.embedding_dim} != teacher {teacher.config.embedding_dim}"
        )
    if encoder_cfg.n_outputs < 2:
        raise DimensionError("student encoder needs n_outputs >= 2")
    if encoder_cfg.mel_bins != frontend.mel_bins:
        raise DimensionError("student mel_bins must match the teacher front-end")
    teacher_bytes_before = params_hash(teacher.state_arrays())

    train_records = manifest.split("train")
    speakers = sorted(manifest.speakers("train"))
    factors = tuple(float(f) for f in cfg.speed_perturb)
    class_labels, label_index = _virtual_classes(speakers, factors)
    by_speaker = {}
    for rec in train_records:
        by_speaker.setdefault(rec.speaker_ids[0], []).append(rec.utterance_id)

    enc_cfg = dataclasses.replace(encoder_cfg, seed=_derive(cfg.seed, "student-encoder"))
    student = Encoder.create(enc_cfg)
    params = {f"encoder.{n}": p for n, p in student.params.items()}
    head = None
    if cfg.loss_mode.startswith("aam_pit"):
        head = AamHead.create(
            enc_cfg.embedding_dim, len(class_labels), seed=_derive(cfg.seed, "student-head"),
            scale=cfg.aam_scale, margin=cfg.aam_margin,
        )
        params["head.weight"] = head.weights
    elif cfg.loss_mode == "aam":
        raise ValueError("loss_mode 'aam' is the teacher objective; use an aam_pit_* mode for the student")

    rng = np.random.default_rng(_derive(cfg.seed, "student-train"))
    load_wav = _waveform_cache(manifest)

    # the teacher is frozen, so its embedding of each (utterance, factor) is fixed
    target_cache = {}

    def embed_fn(utt_id, factor):
        key = (utt_id, factor)
        if key not in target_cache:
            target_cache[key] = teacher_embedding(
                teacher, frontend, resample_speed(load_wav(utt_id), factor)
            )
        return target_cache[key]

    targets_provider = TargetProvider(embed_fn, by_speaker, cfg.target_refresh_epoch, rng)
    metrics = []

    def snapshot(epoch):
        arrays = {n: p.data.copy() for n, p in params.items()}
        arrays["encoder.embed_mean"] = student.embed_mean.copy()
        return Checkpoint(
            kind="student",
            params=arrays,
            config={
                "encoder": enc_cfg.to_dict(),
                "train": cfg.to_dict(),
                "frontend": frontend.to_dict(),
                "labels": class_labels,
                "teacher_hash": params_hash(teacher_ckpt.params),
                "conv_convention": CONV_CONVENTION,
                "slot_layout": SLOT_LAYOUT,
            },
            epoch=epoch,
            rng_state=rng.bit_generator.state,
            metrics=metrics,
        )

    guard = _DivergenceGuard(snapshot)
    batcher = _Batcher(params, cfg)
    batcher.zero()
    for epoch in range(1, cfg.epochs + 1):
        pairs = _pair_distinct_speakers(train_records, rng)
        losses_epoch = []
        batch_losses = []
        pending = []
        for rec_a, rec_b in pairs:
            ratio = float(rng.uniform(*cfg.ratio_db_range))
            f_a = float(factors[int(rng.integers(len(factors)))]) if factors else 1.0
            f_b = float(factors[int(rng.integers(len(factors)))]) if factors else 1.0
            mix = mix_signals(
                resample_speed(load_wav(rec_a.utterance_id), f_a),
                resample_speed(load_wav(rec_b.utterance_id), f_b),
                ratio,
            )
            mix = _maybe_augment(mix, cfg, rng)
            feats = frontend.features(mix).frames
            targets = np.stack([
                targets_provider.get(rec_a.utterance_id, rec_a.speaker_ids[0], epoch, f_a),
                targets_provider.get(rec_b.utterance_id, rec_b.speaker_ids[0], epoch, f_b),
            ])

            def example():
                frames = local_tap(encode_frames(student, feats), enc_cfg.local_tap_window)
                if cfg.loss_mode in ("ts_tpit", "ts_upit"):
                    if cfg.loss_level == "utterance":
                        lv = ts_loss_utterance(targets, tap(frames))
                    elif cfg.loss_mode == "ts_tpit":
                        lv = ts_loss_tpit(targets, frames)
                    else:
                        lv = ts_loss_upit(targets, frames)
                else:
                    pair_labels = [
                        label_index[(rec_a.speaker_ids[0], f_a)],
                        label_index[(rec_b.speaker_ids[0], f_b)],
                    ]
                    permutation = "tpit" if cfg.loss_mode.endswith("tpit") else "upit"
                    student_out = tap(frames) if cfg.loss_level == "utterance" else frames
                    lv = aam_pit_loss(student_out, pair_labels, head, permutation)
                tc.backward(lv.value)
                return lv.item()

            val = guard.run(epoch, example)
            guard.check(val, epoch)
            losses_epoch.append(val)
            pending.append(val)
            batcher.add_example()
            if batcher.count >= cfg.batch_size:
                batcher.step_if_ready()
                batch_losses.append(float(np.mean(pending)))
                pending = []
        batcher.step_if_ready(force=True)
        if pending:
            batch_losses.append(float(np.mean(pending)))
        entry = {"epoch": epoch, "loss": float(np.mean(losses_epoch)), "batch_losses": batch_losses}
        metrics.append(entry)
        _epoch_log(out_dir, {k: v for k, v in entry.items() if k != "batch_losses"})

    # estimate the student's embedding mean over training-style mixtures
    mean_rng = np.random.default_rng(_derive(cfg.seed, "student-embed-mean"))
    sums = np.zeros(enc_cfg.embedding_dim)
    count = 0
    for rec_a, rec_b in _pair_distinct_speakers(train_records, mean_rng)[:64]:
        ratio = float(mean_rng.uniform(*cfg.ratio_db_range))
        mix = mix_signals(load_wav(rec_a.utterance_id), load_wav(rec_b.utterance_id), ratio)
        with tc.no_grad():
            pooled = tap(local_tap(encode_frames(student, frontend.features(mix).frames), enc_cfg.local_tap_window))
        sums += pooled.data.sum(axis=0)
        count += pooled.data.shape[0]
    student.embed_mean = sums / max(count, 1)

    teacher_bytes_after = params_hash(teacher.state_arrays())
    if teacher_bytes_before != teacher_bytes_after:
        raise NumericsError("teacher parameters changed during student training")
    ckpt = snapshot(cfg.epochs)
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "student.ckpt")
    return ckpt
