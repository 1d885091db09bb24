"""Frame-wise embedding encoders and pooling for teacher and student.

The encoder is a frame-rate-preserving stack: an input conv lifts log-mel
frames to the working channel width, residual conv blocks (stride 1, same
padding) refine them, and a linear projection emits K*E channels per frame
that are rearranged into K embedding slots of width E. Slot k occupies the
contiguous channel block [k*E, (k+1)*E); the checkpoint header records this
layout together with the cross-correlation conv convention.

The teacher uses K=1 and plain temporal average pooling. The student uses
K>1 and additionally smooths its frame embeddings with a sliding local mean
(the local TAP) before any pooling; windows are truncated at utterance
boundaries.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .audio import FeatureMatrix
from .errors import DimensionError

SLOT_LAYOUT = "contiguous-channel-blocks"
CONV_CONVENTION = "cross-correlation"


@dataclass(frozen=True)
class EncoderConfig:
    mel_bins: int = 24
    channels: int = 32
    n_blocks: int = 3
    embedding_dim: int = 16
    n_outputs: int = 1  # teacher: 1; student: K
    kernel_width: int = 5
    local_tap_window: int = 11
    dilations: tuple = None  # per block; default 1, 4, 16, ... (x4 growth)
    input_norm: str = "utt"  # utt: scalar per-utterance standardization; cmvn: per-bin; none
    seed: int = 0

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.n_outputs < 1:
            raise ValueError(f"n_outputs must be >= 1, got {self.n_outputs}")
        if self.local_tap_window % 2 != 1:
            raise ValueError(f"local_tap_window must be odd, got {self.local_tap_window}")
        if self.kernel_width % 2 != 1:
            raise ValueError(f"kernel_width must be odd, got {self.kernel_width}")
        if self.dilations is None:
            object.__setattr__(self, "dilations", tuple(4**i for i in range(self.n_blocks)))
        else:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.n_blocks or any(d < 1 for d in self.dilations):
            raise ValueError(f"need {self.n_blocks} dilations >= 1, got {self.dilations}")
        if self.input_norm not in ("utt", "cmvn", "none"):
            raise ValueError(f"input_norm must be 'utt', 'cmvn', or 'none', got {self.input_norm!r}")

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @property
    def receptive_radius(self):
        """Frames of one-sided context feeding each output frame (conv stack only)."""
        r = (self.kernel_width - 1) // 2
        return r * (1 + 2 * sum(self.dilations))


class Encoder:
    """Parameter container for one encoder; forward passes live in free functions.

    ``embed_mean`` is the training-set mean of the pooled embedding, estimated
    after training and subtracted at extraction time (classic centering before
    cosine scoring); zero until estimated.
    """

    def __init__(self, config: EncoderConfig, params: dict, embed_mean=None):
        self.config = config
        self.params = params
        if embed_mean is None:
            embed_mean = np.zeros(config.embedding_dim)
        self.embed_mean = np.asarray(embed_mean, dtype=np.float64)
        if self.embed_mean.shape != (config.embedding_dim,):
            raise DimensionError(f"embed_mean must have shape ({config.embedding_dim},)")

    @classmethod
    def create(cls, config: EncoderConfig) -> "Encoder":
        rng = np.random.default_rng(config.seed)
        w, c, f = config.kernel_width, config.channels, config.mel_bins
        out_dim = config.n_outputs * config.embedding_dim
        dt = tc.default_dtype()

        def conv_init(width, cin, cout):
            std = np.sqrt(2.0 / (width * cin))
            return tc.parameter(rng.normal(0.0, std, size=(width, cin, cout)), dtype=dt)

        params = {
            "conv_in.kernel": conv_init(w, f, c),
            "conv_in.bias": tc.parameter(np.zeros(c), dtype=dt),
        }
        for i in range(config.n_blocks):
            for j in (1, 2):
                params[f"block{i}.conv{j}.kernel"] = conv_init(w, c, c)
                params[f"block{i}.conv{j}.bias"] = tc.parameter(np.zeros(c), dtype=dt)
        params["proj.weight"] = tc.parameter(rng.normal(0.0, np.sqrt(1.0 / c), size=(c, out_dim)), dtype=dt)
        params["proj.bias"] = tc.parameter(np.zeros(out_dim), dtype=dt)
        return cls(config, params)

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict, trainable: bool = False) -> "Encoder":
        template = cls.create(config)
        params = {}
        for name, ref in template.params.items():
            if name not in arrays:
                raise DimensionError(f"missing encoder parameter {name}")
            arr = np.asarray(arrays[name])
            if arr.shape != ref.data.shape:
                raise DimensionError(f"parameter {name} has shape {arr.shape}, expected {ref.data.shape}")
            params[name] = tc.Tensor(arr, requires_grad=trainable)
        return cls(config, params, embed_mean=arrays.get("embed_mean"))

    def parameters(self) -> dict:
        return self.params

    def state_arrays(self) -> dict:
        out = {name: p.data for name, p in self.params.items()}
        out["embed_mean"] = self.embed_mean
        return out


def _as_feature_array(feats):
    if isinstance(feats, FeatureMatrix):
        return feats.frames
    return np.asarray(feats)


def encode_frames(enc: Encoder, feats) -> tc.Tensor:
    """Run the conv stack; returns frame embeddings as a [T, K, E] tensor.

    Input features are standardized per utterance before the first conv
    ("utt": one scalar mean/std over the whole matrix, keeping the spectral
    shape; "cmvn": per mel bin). This lives inside the encoder so that
    checkpointed models are always driven consistently.
    """
    x = _as_feature_array(feats)
    cfg = enc.config
    if x.ndim != 2 or x.shape[1] != cfg.mel_bins:
        raise DimensionError(f"expected [T, {cfg.mel_bins}] features, got {x.shape}")
    if cfg.input_norm == "utt":
        x = (x - x.mean()) / max(x.std(), 1e-5)
    elif cfg.input_norm == "cmvn":
        x = (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-5)
    p = enc.params
    h = tc.relu(tc.add_bias(tc.conv1d(tc.tensor(x, dtype=tc.default_dtype()), p["conv_in.kernel"]), p["conv_in.bias"]))
    for i in range(cfg.n_blocks):
        d = cfg.dilations[i]
        inner = tc.relu(tc.add_bias(tc.conv1d(h, p[f"block{i}.conv1.kernel"], dilation=d), p[f"block{i}.conv1.bias"]))
        inner = tc.add_bias(tc.conv1d(inner, p[f"block{i}.conv2.kernel"], dilation=d), p[f"block{i}.conv2.bias"])
        h = tc.relu(tc.add(h, inner))
    out = tc.add_bias(tc.matmul(h, p["proj.weight"]), p["proj.bias"])
    return tc.reshape(out, (x.shape[0], cfg.n_outputs, cfg.embedding_dim))


def tap(frames: tc.Tensor) -> tc.Tensor:
    """Temporal average pooling: [T, K, E] -> [K, E]."""
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise DimensionError(f"tap expects a non-empty [T, K, E] tensor, got {frames.shape}")
    return tc.mean_axis(frames, 0)


def local_tap(frames: tc.Tensor, window: int = 11, stride: int = 1) -> tc.Tensor:
    """Sliding temporal mean with boundary truncation; frame rate kept at stride 1."""
    return tc.sliding_mean(frames, window, stride)


@dataclass
class Embedding:
    """Utterance-level speaker embedding for one output slot."""

    vector: np.ndarray
    slot: int = 0
    utterance_id: str | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding must be finite")


@dataclass
class FrameEmbeddings:
    """Per-frame embeddings [T, K, E] for one utterance."""

    values: np.ndarray
    utterance_id: str | None = None


def teacher_forward(enc: Encoder, feats, utterance_id=None):
    """Single-speaker path: encode, pool, center; returns (Embedding, FrameEmbeddings)."""
    if enc.config.n_outputs != 1:
        raise DimensionError(f"teacher encoder must have n_outputs=1, got {enc.config.n_outputs}")
    with tc.no_grad():
        frames = encode_frames(enc, feats)
        d = tap(frames)
    return (
        Embedding(d.data[0] - enc.embed_mean, slot=0, utterance_id=utterance_id),
        FrameEmbeddings(frames.data.copy(), utterance_id=utterance_id),
    )


def student_forward(enc: Encoder, feats, utterance_id=None):
    """Mixture path: encode, local TAP, pool per slot, center; slot order is arbitrary."""
    with tc.no_grad():
        frames = local_tap(encode_frames(enc, feats), enc.config.local_tap_window)
        pooled = tap(frames)
    embeddings = [
        Embedding(pooled.data[k] - enc.embed_mean, slot=k, utterance_id=utterance_id)
        for k in range(enc.config.n_outputs)
    ]
    return embeddings, FrameEmbeddings(frames.data.copy(), utterance_id=utterance_id)
