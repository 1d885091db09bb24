"""Synthetic speaker corpus, mixture simulation, noise, and the log-mel front-end.

The corpus is fully synthetic: each speaker is a source-filter voice defined
by a fundamental frequency, three formant resonators, a spectral tilt, and a
breathiness fraction. Utterances are deterministic functions of
(profile, seed), so corpora regenerate bit-identically and train/eval splits
can use disjoint speaker sets.

Front-end conventions (recorded with every artifact that depends on them):
16 kHz sample rate, periodic Hann window, magnitude-squared spectrum,
HTK-style mel filterbank, natural log with floor 1e-10.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError

LOG_FLOOR = 1e-10
DEFAULT_SAMPLE_RATE = 16000


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeakerProfile:
    """Latent voice characteristics of one synthetic speaker."""

    speaker_id: str
    f0_base: float
    f0_jitter: float
    formants: tuple  # three (frequency_hz, bandwidth_hz) pairs, increasing
    spectral_tilt: float  # dB per octave, negative
    breathiness: float

    def __post_init__(self):
        if not 70.0 <= self.f0_base <= 320.0:
            raise ValueError(f"f0_base {self.f0_base} outside [70, 320] Hz")
        if not 0.0 <= self.breathiness <= 1.0:
            raise ValueError(f"breathiness {self.breathiness} outside [0, 1]")
        freqs = [f for f, _ in self.formants]
        if len(freqs) != 3 or any(f2 <= f1 for f1, f2 in zip(freqs, freqs[1:])):
            raise ValueError(f"formants must be 3 strictly increasing frequencies, got {freqs}")


@dataclass
class Waveform:
    """Mono time-domain signal; the unit of all synthesis and mixing."""

    samples: np.ndarray
    sample_rate: int
    utterance_id: str | None = None
    speaker_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform samples must be finite")

    def __len__(self):
        return len(self.samples)

    def duration_s(self):
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """T x F log-mel frames."""

    frames: np.ndarray
    frame_advance_s: float
    window_s: float
    mel_bins: int

    @property
    def n_frames(self):
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _derive_seed(*parts):
    """Stable integer seed from arbitrary string/int parts (not hash())."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _resonator_response(freqs, center_hz, bandwidth_hz, sample_rate):
    """Peak-normalized complex response of a two-pole resonator on a freq grid."""
    r = np.exp(-np.pi * bandwidth_hz / sample_rate)
    theta = 2.0 * np.pi * center_hz / sample_rate
    z = np.exp(-2j * np.pi * freqs / sample_rate)
    h = 1.0 / (1.0 - 2.0 * r * np.cos(theta) * z + (r * r) * z * z)
    return h / np.max(np.abs(h))


def _f0_contour(profile, n_samples, sample_rate, rng):
    """Slow multiplicative wander around f0_base, bounded by the jitter fraction."""
    n_ctrl = max(2, int(round(n_samples / (0.05 * sample_rate))) + 1)
    ctrl = rng.uniform(-1.0, 1.0, size=n_ctrl)
    pos = np.linspace(0.0, 1.0, n_ctrl)
    t = np.arange(n_samples) / max(n_samples - 1, 1)
    return profile.f0_base * (1.0 + profile.f0_jitter * np.interp(t, pos, ctrl))


def _harmonic_source(f0, spectral_tilt, sample_rate):
    """Band-limited harmonic stack following the instantaneous f0 contour."""
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = max(1, int(np.floor(0.45 * sample_rate / float(np.max(f0)))))
    out = np.zeros_like(phase)
    for h in range(1, n_harm + 1):
        amp = 10.0 ** (spectral_tilt * np.log2(h) / 20.0)
        out += amp * np.sin(h * phase)
    return out


def _syllable_envelope(n, sample_rate, rng):
    """Syllable-rate energy modulation: raised-cosine bumps over a soft floor.

    Frame-level dominance in a two-speaker mixture then alternates between
    the speakers, which the frame-wise training signal depends on.
    """
    rate = rng.uniform(2.5, 5.0)
    env = np.zeros(n)
    pos = 0
    while pos < n:
        dur = max(int(sample_rate / rate * rng.uniform(0.7, 1.3)), int(0.05 * sample_rate))
        seg = min(dur, n - pos)
        floor = rng.uniform(0.10, 0.35)
        x = np.arange(seg) / dur
        env[pos : pos + seg] = floor + (1.0 - floor) * 0.5 * (1.0 - np.cos(2.0 * np.pi * x))
        pos += seg
    return env


def _segment_windows(n_samples, n_segments, fade):
    """Complementary trapezoid windows covering [0, n) with raised-cosine ramps."""
    edges = np.linspace(0, n_samples, n_segments + 1).astype(int)
    ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(fade) + 0.5) / fade) if fade > 0 else None
    windows = []
    for i in range(n_segments):
        lo = max(edges[i] - fade // 2, 0) if i > 0 else 0
        hi = min(edges[i + 1] + (fade - fade // 2), n_samples) if i < n_segments - 1 else n_samples
        w = np.ones(hi - lo)
        if i > 0 and fade > 0:
            w[:fade] = ramp
        if i < n_segments - 1 and fade > 0:
            w[-fade:] = ramp[::-1]
        windows.append((lo, hi, w))
    return windows


def synth_utterance(profile: SpeakerProfile, duration_s: float, seed: int) -> Waveform:
    """Render one utterance of a synthetic speaker, peak-normalized to 0.5.

    A jittered harmonic pulse train is filtered through the profile's formant
    resonators and mixed with noise according to the breathiness fraction.
    Formant targets drift slightly between overlapping segments so utterances
    are not stationary. Deterministic given (profile, seed).
    """
    voiced, noise, sample_rate = _synth_components(profile, duration_s, seed)
    out = voiced + noise
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out * (0.5 / peak)
    return Waveform(out, sample_rate, speaker_ids=[profile.speaker_id])


def _synth_components(profile, duration_s, seed, sample_rate=DEFAULT_SAMPLE_RATE):
    """Filtered harmonic and noise branches before summation (test hook)."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    rng = np.random.default_rng(_derive_seed(seed, profile.speaker_id))
    n = int(round(duration_s * sample_rate))
    f0 = _f0_contour(profile, n, sample_rate, rng)
    harm = _harmonic_source(f0, profile.spectral_tilt, sample_rate)
    harm /= max(np.sqrt(np.mean(harm**2)), 1e-12)
    envelope = _syllable_envelope(n, sample_rate, rng)
    harm *= envelope
    b = profile.breathiness
    raw_noise = rng.standard_normal(n) * envelope if b > 0 else np.zeros(n)

    n_segments = max(1, int(round(duration_s / 0.4)))
    fade = min(int(0.02 * sample_rate), n // max(n_segments, 1) // 2)
    voiced = np.zeros(n)
    noise = np.zeros(n)
    for lo, hi, w in _segment_windows(n, n_segments, fade):
        # articulation: per-segment formant drift, vowel-like within a speaker
        wobble = 1.0 + 0.08 * rng.uniform(-1.0, 1.0, size=len(profile.formants))
        freqs = np.fft.rfftfreq(hi - lo, d=1.0 / sample_rate)
        h = np.ones(len(freqs), dtype=complex)
        for (fc, bw), m in zip(profile.formants, wobble):
            h *= _resonator_response(freqs, fc * m, bw, sample_rate)
        voiced[lo:hi] += np.fft.irfft(np.fft.rfft(harm[lo:hi] * w) * h, n=hi - lo)
        if b > 0:
            noise[lo:hi] += np.fft.irfft(np.fft.rfft(raw_noise[lo:hi] * w) * h, n=hi - lo)
    return (1.0 - b) * voiced, b * noise, sample_rate


def random_profile(speaker_id: str, rng: np.random.Generator) -> SpeakerProfile:
    """Draw a speaker from the corpus prior.

    Formants scale together with a vocal-tract-length factor plus small
    per-formant idiosyncrasies, so speaker identity lives on a low-dimensional
    manifold (as it does for real voices) instead of three independent axes.
    """
    vtl = rng.uniform(0.80, 1.20)
    f1 = 560.0 * vtl * rng.uniform(0.96, 1.04)
    f2 = 1480.0 * vtl * rng.uniform(0.96, 1.04)
    f3 = 2700.0 * vtl * rng.uniform(0.96, 1.04)
    return SpeakerProfile(
        speaker_id=speaker_id,
        f0_base=rng.uniform(85.0, 280.0),
        f0_jitter=rng.uniform(0.02, 0.05),
        formants=(
            (f1, rng.uniform(70.0, 130.0)),
            (f2, rng.uniform(90.0, 180.0)),
            (f3, rng.uniform(120.0, 240.0)),
        ),
        spectral_tilt=rng.uniform(-15.0, -9.0),
        breathiness=rng.uniform(0.02, 0.20),
    )


# ---------------------------------------------------------------------------
# mixing and augmentation
# ---------------------------------------------------------------------------

def mix_components(x1: Waveform, x2: Waveform, ratio_db: float):
    """Truncated first component and power-scaled second component of a mixture."""
    if x1.sample_rate != x2.sample_rate:
        raise DimensionError(f"sample rates differ: {x1.sample_rate} vs {x2.sample_rate}")
    if not np.isfinite(ratio_db):
        raise ValueError("ratio_db must be finite")
    n = min(len(x1), len(x2))
    a = x1.samples[:n]
    b = x2.samples[:n]
    p1 = float(np.mean(a * a))
    p2 = float(np.mean(b * b))
    if p1 <= 0.0 or p2 <= 0.0:
        raise DegenerateInputError("mix_signals: a truncated signal has zero power")
    scale = np.sqrt(p1 / (p2 * 10.0 ** (ratio_db / 10.0)))
    return a, scale * b


def mix_signals(x1: Waveform, x2: Waveform, ratio_db: float) -> Waveform:
    """Min-mode two-speaker mixture with the requested power ratio.

    The output is x1 plus x2 scaled so power(x1)/power(scaled x2) equals
    10^(ratio_db/10) over the overlapped region.
    """
    c1, c2 = mix_components(x1, x2, ratio_db)
    return Waveform(
        c1 + c2,
        x1.sample_rate,
        speaker_ids=list(x1.speaker_ids) + list(x2.speaker_ids),
    )


def resample_speed(x: Waveform, factor: float) -> Waveform:
    """Playback-speed change by linear interpolation: frequencies scale by
    ``factor``, duration by 1/factor. With distinct class labels per factor
    this acts as a vocal-tract/pitch perturbation that multiplies the number
    of training voices."""
    if factor <= 0:
        raise ValueError(f"resample factor must be positive, got {factor}")
    if factor == 1.0:
        return x
    n_out = int(round(len(x) / factor))
    pos = np.arange(n_out) * factor
    src = np.arange(len(x))
    return Waveform(
        np.interp(pos, src, x.samples),
        x.sample_rate,
        utterance_id=x.utterance_id,
        speaker_ids=list(x.speaker_ids),
    )


def add_noise(x: Waveform, snr_db: float, seed: int, color: str = "white") -> Waveform:
    """Add white or pink noise at the requested signal-to-noise ratio."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    p_sig = float(np.mean(x.samples**2))
    if p_sig <= 0.0:
        raise DegenerateInputError("add_noise: input has zero power")
    rng = np.random.default_rng(_derive_seed("noise", seed))
    n = len(x)
    noise = rng.standard_normal(n)
    if color == "pink":
        spec = np.fft.rfft(noise)
        f = np.fft.rfftfreq(n, d=1.0 / x.sample_rate)
        f[0] = f[1] if len(f) > 1 else 1.0
        spec /= np.sqrt(f)
        noise = np.fft.irfft(spec, n=n)
    elif color != "white":
        raise ValueError(f"unknown noise color {color!r}")
    p_noise = float(np.mean(noise**2))
    scale = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(
        x.samples + scale * noise,
        x.sample_rate,
        utterance_id=x.utterance_id,
        speaker_ids=list(x.speaker_ids),
    )


# ---------------------------------------------------------------------------
# log-mel front-end
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int) -> np.ndarray:
    """Triangular HTK-mel filters [mel_bins, n_fft//2 + 1], peak weight 1."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    fb = np.zeros((mel_bins, n_bins))
    for m in range(mel_bins):
        lo, center, hi = points[m], points[m + 1], points[m + 2]
        up = (freqs - lo) / (center - lo)
        down = (hi - freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return 1 + (n_samples - window) // hop


def logmel(
    x: Waveform,
    window_s: float = 0.020,
    hop_s: float = 0.008,
    mel_bins: int = 24,
) -> FeatureMatrix:
    """Hann-windowed power spectrum through a mel filterbank, log with floor 1e-10."""
    window = int(round(window_s * x.sample_rate))
    hop = int(round(hop_s * x.sample_rate))
    if len(x) < window:
        raise DimensionError(f"signal length {len(x)} shorter than one window ({window})")
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    frames = np.lib.stride_tricks.sliding_window_view(x.samples, window)[::hop]
    spec = np.fft.rfft(frames * hann, axis=1)
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(x.sample_rate, window, mel_bins)
    mel = power @ fb.T
    out = np.log(np.maximum(mel, LOG_FLOOR))
    return FeatureMatrix(out, frame_advance_s=hop_s, window_s=window_s, mel_bins=mel_bins)


@dataclass(frozen=True)
class FrontEnd:
    """Feature-extraction parameters shared by teacher and student."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_s: float = 0.020
    hop_s: float = 0.008
    mel_bins: int = 24

    def features(self, x: Waveform) -> FeatureMatrix:
        if x.sample_rate != self.sample_rate:
            raise DimensionError(f"waveform rate {x.sample_rate} != front-end rate {self.sample_rate}")
        return logmel(x, self.window_s, self.hop_s, self.mel_bins)

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# WAV I/O (mono PCM 16-bit little-endian)
# ---------------------------------------------------------------------------

def write_wav(path, x: Waveform):
    samples = np.clip(x.samples, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(x.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path, utterance_id=None, speaker_ids=None) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise FormatError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    n = len(raw) // 2
    pcm = struct.unpack(f"<{n}h", raw)
    samples = np.asarray(pcm, dtype=np.float64) / 32767.0
    return Waveform(samples, rate, utterance_id=utterance_id, speaker_ids=list(speaker_ids or []))


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 20
    utterances_per_speaker: int = 30
    duration_s: float = 2.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    train_speakers: int = 14

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.n_speakers}")
        if not 0 < self.train_speakers < self.n_speakers:
            raise ValueError("train_speakers must leave a non-empty eval split")


@dataclass
class ManifestRecord:
    utterance_id: str
    speaker_ids: list
    path: str  # relative to the manifest directory
    seed: int
    duration_s: float
    split: str

    def to_dict(self):
        return dataclasses.asdict(self)


class CorpusManifest:
    """Utterance index backed by a JSON-lines file next to the audio."""

    def __init__(self, records, root):
        self.records = list(records)
        self.root = Path(root)
        ids = [r.utterance_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest contains duplicate utterance_ids")
        self._by_id = {r.utterance_id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, utterance_id) -> ManifestRecord:
        return self._by_id[utterance_id]

    def __contains__(self, utterance_id):
        return utterance_id in self._by_id

    def split(self, tag) -> list:
        return [r for r in self.records if r.split == tag]

    def speakers(self, tag) -> list:
        seen = {}
        for r in self.split(tag):
            for s in r.speaker_ids:
                seen[s] = None
        return list(seen)

    def load_waveform(self, utterance_id) -> Waveform:
        rec = self._by_id[utterance_id]
        return read_wav(self.root / rec.path, utterance_id=utterance_id, speaker_ids=rec.speaker_ids)

    def add(self, record: ManifestRecord):
        if record.utterance_id in self._by_id:
            raise FormatError(f"duplicate utterance_id {record.utterance_id}")
        self.records.append(record)
        self._by_id[record.utterance_id] = record

    def content_hash(self) -> str:
        blob = json.dumps([r.to_dict() for r in self.records], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path):
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        records = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                records.append(ManifestRecord(**d))
        manifest = cls(records, path.parent)
        for r in manifest.records:
            if not (manifest.root / r.path).exists():
                raise FormatError(f"manifest references missing file {r.path}")
        return manifest


def _profile_separation(p: SpeakerProfile, q: SpeakerProfile) -> float:
    """Pairwise speaker distance in (log f0, log vocal-tract scale) units.

    Scaled so that 1.0 clears the within-speaker smear: per-utterance mean f0
    wanders a few percent (jitter up to 5%) and segment articulation moves
    formants up to 8%, so speakers need a 15% f0 gap or a 12% first-formant
    gap before at least one cue separates them reliably in the mel front-end
    (F1 carries the most energy and is the formant cue encoders latch onto).
    """
    d_f0 = abs(np.log(p.f0_base / q.f0_base)) / 0.15
    d_f1 = abs(np.log(p.formants[0][0] / q.formants[0][0])) / 0.12
    return max(d_f0, d_f1)


def _draw_profiles(config, seed):
    """Rejection-sample speaker profiles with a minimum pairwise separation.

    Train-split speakers only need to be distinguishable (>= 1.0), keeping the
    voice manifold densely covered for generalization. Eval-split speakers
    form the verification cohort: they keep the ordinary margin from train
    voices but a wide margin (>= 1.8) from each other, like the distinct
    voices of real benchmark trial sets. If a threshold cannot be met the
    most-separated attempt wins.
    """
    profiles = []
    for s in range(config.n_speakers):
        speaker_id = f"spk{s:03d}"
        is_eval = s >= config.train_speakers
        best = None
        for attempt in range(300):
            rng = np.random.default_rng(_derive_seed(seed, "profile", speaker_id, attempt))
            prof = random_profile(speaker_id, rng)
            margin = min(
                (
                    _profile_separation(prof, other) / (1.8 if is_eval and o >= config.train_speakers else 1.0)
                    for o, other in enumerate(profiles)
                ),
                default=np.inf,
            )
            if best is None or margin > best[0]:
                best = (margin, prof)
            if margin >= 1.0:
                break
        profiles.append(best[1])
    return profiles


def build_corpus(config: CorpusConfig, seed: int, out_dir) -> CorpusManifest:
    """Synthesize the corpus, write WAVs + manifest.jsonl, return the manifest.

    Train and eval splits use disjoint speaker sets; speaker profiles keep a
    minimum pairwise separation so every corpus seed yields discriminable
    voices. Per-utterance seeds are derived from (master seed, utterance_id),
    so generation is reproducible and parallelizable per utterance.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    records = []
    profiles = _draw_profiles(config, seed)
    for s, profile in enumerate(profiles):
        speaker_id = profile.speaker_id
        split = "train" if s < config.train_speakers else "eval"
        for u in range(config.utterances_per_speaker):
            utt_id = f"{speaker_id}_u{u:03d}"
            utt_seed = _derive_seed(seed, "utt", utt_id)
            wav = synth_utterance(profile, config.duration_s, utt_seed)
            rel = f"wav/{utt_id}.wav"
            write_wav(out_dir / rel, wav)
            records.append(
                ManifestRecord(
                    utterance_id=utt_id,
                    speaker_ids=[speaker_id],
                    path=rel,
                    seed=utt_seed,
                    duration_s=config.duration_s,
                    split=split,
                )
            )
    manifest = CorpusManifest(records, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
