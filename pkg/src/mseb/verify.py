"""Multi-speaker verification: trials, scoring, EER / minDCF, and analysis.

Scenarios pair clean utterances and two-speaker mixtures (s-vs-s, s-vs-m,
m-vs-m). Mixture sides sharing more than one speaker with the other side are
never generated (at most one shared speaker per trial pair). Scoring is
either "any speaker" (retain only the maximal pairwise cosine of a trial) or
"per speaker" (greedy disjoint pairing of the K x K cosine matrix, highest
similarity first; the first n_shared selected pairs carry target labels).

EER is computed at the crossing of the FAR/FRR staircase with linear
interpolation between adjacent operating points; minDCF is the threshold
minimum of the prior-weighted detection cost normalized by the cost of the
trivial decision, so uninformative scores saturate at 1.0. Both depend only
on the ordering of the scores.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import CorpusManifest, ManifestRecord, Waveform, mix_signals, write_wav
from .errors import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    UnsupportedConfigError,
)
from .model import Embedding, student_forward, teacher_forward
from .trainer import Checkpoint, params_hash, student_from_checkpoint, teacher_from_checkpoint

SCENARIOS = ("svs", "svm", "mvm")


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    scenario: str
    n_shared: int
    side_a: str
    side_b: str


@dataclass
class ScoredTrial:
    """One trial's similarity decisions: a single (score, label) for any-spk
    scoring, K of them (in greedy selection order) for per-spk scoring."""

    trial: Trial
    scores: list  # (score, label) pairs

    def __post_init__(self):
        for s, label in self.scores:
            if not -1.0 <= s <= 1.0:
                raise DimensionError(f"similarity score {s} outside [-1, 1]")
            if label not in (0, 1):
                raise DimensionError(f"label {label} must be 0 or 1")


@dataclass
class TrialSet:
    trials: list
    scenario: str
    seed: int
    manifest_hash: str
    n_target: int = 0
    n_nontarget: int = 0
    mixture_recipes: dict = field(default_factory=dict)

    def __post_init__(self):
        pairs = {(t.side_a, t.side_b) for t in self.trials}
        if len(pairs) != len(self.trials):
            raise FormatError("duplicate (side_a, side_b) pairs in trial set")

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for t in self.trials:
                fh.write(f"{t.scenario} {t.n_shared} {t.side_a} {t.side_b}\n")
        meta = {
            "scenario": self.scenario,
            "seed": self.seed,
            "manifest_hash": self.manifest_hash,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
            "mixture_recipes": self.mixture_recipes,
        }
        with open(path.with_suffix(path.suffix + ".meta.json"), "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "TrialSet":
        path = Path(path)
        trials = []
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4 or parts[0] not in SCENARIOS:
                    raise FormatError(f"{path}:{ln}: expected '<scenario> <n_shared> <id_a> <id_b>'")
                trials.append(Trial(parts[0], int(parts[1]), parts[2], parts[3]))
        if not trials:
            raise FormatError(f"{path}: empty trial file")
        meta_path = path.with_suffix(path.suffix + ".meta.json")
        meta = {}
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
        return cls(
            trials=trials,
            scenario=meta.get("scenario", trials[0].scenario),
            seed=meta.get("seed", 0),
            manifest_hash=meta.get("manifest_hash", ""),
            n_target=meta.get("n_target", sum(1 for t in trials if t.n_shared > 0)),
            n_nontarget=meta.get("n_nontarget", sum(1 for t in trials if t.n_shared == 0)),
            mixture_recipes=meta.get("mixture_recipes", {}),
        )


class ManifestChain:
    """Resolve utterance ids across several manifests (corpus + trial mixtures)."""

    def __init__(self, *manifests):
        self.manifests = [m for m in manifests if m is not None]

    def record(self, utt_id) -> ManifestRecord:
        for m in self.manifests:
            if utt_id in m:
                return m[utt_id]
        raise FormatError(f"utterance {utt_id} not found in any manifest")

    def load_waveform(self, utt_id) -> Waveform:
        for m in self.manifests:
            if utt_id in m:
                return m.load_waveform(utt_id)
        raise FormatError(f"utterance {utt_id} not found in any manifest")


# ---------------------------------------------------------------------------
# trial generation
# ---------------------------------------------------------------------------

def _speaker_pool(manifest, split="eval"):
    by_speaker = {}
    for rec in manifest.split(split):
        by_speaker.setdefault(rec.speaker_ids[0], []).append(rec.utterance_id)
    return dict(sorted(by_speaker.items()))


_MIN_SPEAKERS = {"svs": 2, "svm": 3, "mvm": 4}


def gen_trials(
    manifest: CorpusManifest,
    scenario: str,
    n_trials: int,
    seed: int,
    out_dir,
    ratio_db_range=(-5.0, 5.0),
) -> tuple:
    """Build a ~50/50 target/nontarget trial set on the eval split.

    Mixture sides are materialized as WAV files under ``out_dir/mixtures``
    with their ratios recorded; returns (TrialSet, mixtures_manifest).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    pool = _speaker_pool(manifest)
    speakers = list(pool)
    if len(speakers) < _MIN_SPEAKERS[scenario]:
        raise DegenerateInputError(
            f"{scenario} needs >= {_MIN_SPEAKERS[scenario]} eval speakers, got {len(speakers)}"
        )
    rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(f"{seed}:{scenario}:trials".encode()).digest()[:8], "little")
    )
    out_dir = Path(out_dir)
    mix_dir = out_dir / "mixtures"
    mixture_records = []
    mixture_recipes = {}
    wave_cache = {}

    def load(utt_id):
        if utt_id not in wave_cache:
            wave_cache[utt_id] = manifest.load_waveform(utt_id)
        return wave_cache[utt_id]

    def pick_speakers(n):
        idx = rng.choice(len(speakers), size=n, replace=False)
        return [speakers[int(i)] for i in idx]

    def pick_utt(speaker, exclude=()):
        options = [u for u in pool[speaker] if u not in exclude]
        return options[int(rng.integers(len(options)))]

    def materialize_mixture(utt1, utt2):
        mix_id = f"mix_{scenario}_{seed}_{len(mixture_records):05d}"
        ratio = float(rng.uniform(*ratio_db_range))
        mixed = mix_signals(load(utt1), load(utt2), ratio)
        peak = float(np.max(np.abs(mixed.samples)))
        if peak > 0.95:  # keep headroom for the 16-bit file
            mixed = Waveform(mixed.samples * (0.95 / peak), mixed.sample_rate, speaker_ids=mixed.speaker_ids)
        mix_dir.mkdir(parents=True, exist_ok=True)
        rel = f"mixtures/{mix_id}.wav"
        write_wav(out_dir / rel, mixed)
        mixture_records.append(
            ManifestRecord(
                utterance_id=mix_id,
                speaker_ids=list(mixed.speaker_ids),
                path=rel,
                seed=seed,
                duration_s=len(mixed.samples) / mixed.sample_rate,
                split="trial",
            )
        )
        mixture_recipes[mix_id] = {"sources": [utt1, utt2], "ratio_db": ratio}
        return mix_id

    n_target = n_trials // 2
    trials = []
    seen = set()
    attempts = 0
    max_attempts = 200 * n_trials + 1000
    multi_speakers = [s for s in speakers if len(pool[s]) >= 2]
    while len(trials) < n_trials:
        attempts += 1
        if attempts > max_attempts:
            raise DegenerateInputError(
                f"could not generate {n_trials} distinct {scenario} trials from this eval split"
            )
        want_target = len(trials) < n_target
        if scenario == "svs":
            if want_target:
                if not multi_speakers:
                    raise DegenerateInputError("svs targets need a speaker with >= 2 utterances")
                spk = multi_speakers[int(rng.integers(len(multi_speakers)))]
                a = pick_utt(spk)
                b = pick_utt(spk, exclude=(a,))
                n_shared = 1
            else:
                s1, s2 = pick_speakers(2)
                a, b = pick_utt(s1), pick_utt(s2)
                n_shared = 0
        elif scenario == "svm":
            if want_target:
                s_a, s_b = pick_speakers(2)
                a = pick_utt(s_a)
                mix_src = pick_utt(s_a, exclude=(a,)) if len(pool[s_a]) >= 2 else a
                b = materialize_mixture(mix_src, pick_utt(s_b))
                n_shared = 1
            else:
                s_a, s_b, s_c = pick_speakers(3)
                a = pick_utt(s_a)
                b = materialize_mixture(pick_utt(s_b), pick_utt(s_c))
                n_shared = 0
        else:  # mvm
            if want_target:
                s_a, s_b, s_c = pick_speakers(3)
                u1 = pick_utt(s_a)
                u2 = pick_utt(s_a, exclude=(u1,)) if len(pool[s_a]) >= 2 else u1
                a = materialize_mixture(u1, pick_utt(s_b))
                b = materialize_mixture(u2, pick_utt(s_c))
                n_shared = 1
            else:
                s_a, s_b, s_c, s_d = pick_speakers(4)
                a = materialize_mixture(pick_utt(s_a), pick_utt(s_b))
                b = materialize_mixture(pick_utt(s_c), pick_utt(s_d))
                n_shared = 0
        if (a, b) in seen or a == b:
            continue
        seen.add((a, b))
        trials.append(Trial(scenario, n_shared, a, b))

    mixtures_manifest = CorpusManifest(mixture_records, out_dir)
    if mixture_records:
        mixtures_manifest.save(out_dir / "mixtures.jsonl")
    trialset = TrialSet(
        trials=trials,
        scenario=scenario,
        seed=seed,
        manifest_hash=manifest.content_hash(),
        n_target=sum(1 for t in trials if t.n_shared > 0),
        n_nontarget=sum(1 for t in trials if t.n_shared == 0),
        mixture_recipes=mixture_recipes,
    )
    audit_trialset(trialset, ManifestChain(manifest, mixtures_manifest))
    return trialset, mixtures_manifest


def audit_trialset(trialset: TrialSet, chain: ManifestChain):
    """Check the shared-speaker bookkeeping of every trial against the manifests."""
    for t in trialset.trials:
        spk_a = set(chain.record(t.side_a).speaker_ids)
        spk_b = set(chain.record(t.side_b).speaker_ids)
        shared = len(spk_a & spk_b)
        if shared != t.n_shared:
            raise FormatError(f"trial {t}: recorded n_shared={t.n_shared} but manifests give {shared}")
        if shared > 1:
            raise FormatError(f"trial {t}: more than one shared speaker")


# ---------------------------------------------------------------------------
# embedding extraction and scoring
# ---------------------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na2 = float(a @ a)
    nb2 = float(b @ b)
    if na2 <= 0.0 or nb2 <= 0.0:
        raise DegenerateInputError("cosine of a zero embedding")
    if np.array_equal(a, b):
        return 1.0
    c = float(a @ b) / float(np.sqrt(na2 * nb2))
    return min(1.0, max(-1.0, c))


def extract_for_side(
    utt_id: str,
    chain: ManifestChain,
    teacher_enc,
    student_enc,
    frontend,
    teacher_on_mixture: bool = False,
) -> list:
    """Embeddings for one trial side: teacher on clean sides, student on mixtures.

    ``teacher_on_mixture`` forces the single-speaker extractor onto mixture
    sides (one embedding regardless of K), the baseline configuration.
    """
    rec = chain.record(utt_id)
    feats = frontend.features(chain.load_waveform(utt_id))
    if len(rec.speaker_ids) <= 1 or teacher_on_mixture:
        emb, _ = teacher_forward(teacher_enc, feats, utterance_id=utt_id)
        return [emb]
    if student_enc is None:
        raise UnsupportedConfigError(f"mixture side {utt_id} needs a student model")
    embs, _ = student_forward(student_enc, feats, utterance_id=utt_id)
    return embs


def score_any_spk(emb_a: list, emb_b: list) -> float:
    """Maximum cosine over all pairs of side embeddings."""
    if not emb_a or not emb_b:
        raise DimensionError("score_any_spk needs non-empty embedding lists")
    return max(
        cosine_similarity(x.vector if isinstance(x, Embedding) else x, y.vector if isinstance(y, Embedding) else y)
        for x in emb_a
        for y in emb_b
    )


def score_per_spk(emb_a: list, emb_b: list, n_shared: int) -> list:
    """Greedy disjoint pairing of the K x K cosine matrix, highest first.

    Returns K (score, label) pairs in selection order; the first ``n_shared``
    get label 1. Ties break on lexicographic (row, col). n_shared > 1 is
    outside the generated trials and the greedy rule's behavior there is
    experimental.
    """
    k = len(emb_a)
    if len(emb_b) != k:
        raise DimensionError(f"per-spk scoring needs equal-length sides, got {k} and {len(emb_b)}")
    if n_shared > k:
        raise DimensionError(f"n_shared {n_shared} exceeds K={k}")
    vec = lambda e: e.vector if isinstance(e, Embedding) else e
    mat = np.array([[cosine_similarity(vec(x), vec(y)) for y in emb_b] for x in emb_a])
    rows = set(range(k))
    cols = set(range(k))
    out = []
    for rank in range(k):
        best = None
        for i in sorted(rows):
            for j in sorted(cols):
                if best is None or mat[i, j] > best[0]:
                    best = (mat[i, j], i, j)
        score, i, j = best
        rows.remove(i)
        cols.remove(j)
        out.append((float(score), 1 if rank < n_shared else 0))
    return out


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------

def _roc_corners(scores, labels):
    """(FAR, FRR) at every acceptance set consistent with the score ordering."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be equal-length 1-D arrays")
    n_t = int(labels.sum())
    n_n = len(labels) - n_t
    if n_t == 0 or n_n == 0:
        raise DegenerateInputError("need at least one target and one nontarget score")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    cum_t = np.cumsum(l)
    boundaries = np.flatnonzero(np.diff(s) != 0.0) + 1  # k values at distinct thresholds
    ks = np.concatenate([[0], boundaries, [len(s)]])
    accepted_targets = np.concatenate([[0], cum_t[ks[1:] - 1]])
    far = (ks - accepted_targets) / n_n
    frr = 1.0 - accepted_targets / n_t
    return far, frr


def compute_eer(scores, labels) -> float:
    """Equal error rate with linear interpolation at the FAR/FRR crossing."""
    far, frr = _roc_corners(scores, labels)
    diff = far - frr
    idx = int(np.argmax(diff >= 0.0))  # first corner at/after the crossing
    if diff[idx] == 0.0:
        return float(far[idx])
    d0, d1 = diff[idx - 1], diff[idx]
    s = d0 / (d0 - d1)
    return float(far[idx - 1] + s * (far[idx] - far[idx - 1]))


def compute_min_dcf(scores, labels, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all thresholds."""
    if not 0.0 < p_target < 1.0:
        raise ValueError(f"p_target must be in (0, 1), got {p_target}")
    far, frr = _roc_corners(scores, labels)
    dcf = p_target * c_miss * frr + (1.0 - p_target) * c_fa * far
    return float(np.min(dcf) / min(p_target * c_miss, (1.0 - p_target) * c_fa))


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------

def evaluate(
    trialset: TrialSet,
    manifests,
    teacher: Checkpoint,
    student: Checkpoint = None,
    mode: str = "any_spk",
    p_target: float = None,
    teacher_on_mixture: bool = False,
) -> dict:
    """Score every trial, aggregate into one list, and report EER / minDCF."""
    if mode not in ("any_spk", "per_spk"):
        raise ValueError(f"mode must be 'any_spk' or 'per_spk', got {mode!r}")
    if mode == "per_spk":
        if trialset.scenario != "mvm":
            raise UnsupportedConfigError("per-spk scoring is defined for the mvm scenario only")
        if teacher_on_mixture:
            raise UnsupportedConfigError(
                "per-spk scoring with the single-embedding extractor on mixtures is undefined"
            )
    if isinstance(manifests, (list, tuple)):
        chain = ManifestChain(*manifests)
    elif isinstance(manifests, ManifestChain):
        chain = manifests
    else:
        chain = ManifestChain(manifests)
    teacher_enc, _, frontend = teacher_from_checkpoint(teacher)
    student_enc = student_from_checkpoint(student) if student is not None else None
    if p_target is None:
        p_target = 0.01 if trialset.scenario == "svs" else 0.05

    cache = {}

    def side(utt_id):
        key = (utt_id, teacher_on_mixture)
        if key not in cache:
            cache[key] = extract_for_side(
                utt_id, chain, teacher_enc, student_enc, frontend, teacher_on_mixture=teacher_on_mixture
            )
        return cache[key]

    scored = []
    for t in trialset.trials:
        emb_a = side(t.side_a)
        emb_b = side(t.side_b)
        if mode == "any_spk":
            pairs = [(score_any_spk(emb_a, emb_b), 1 if t.n_shared > 0 else 0)]
        else:
            pairs = score_per_spk(emb_a, emb_b, t.n_shared)
        scored.append(ScoredTrial(t, pairs))
    scores = [s for st in scored for s, _ in st.scores]
    labels = [l for st in scored for _, l in st.scores]
    report = {
        "scenario": trialset.scenario,
        "mode": mode,
        "eer": compute_eer(scores, labels),
        "min_dcf": compute_min_dcf(scores, labels, p_target),
        "p_target": p_target,
        "n_trials": len(trialset.trials),
        "n_scores": len(scores),
        "teacher_on_mixture": teacher_on_mixture,
        "model_hashes": {
            "teacher": params_hash(teacher.params),
            "student": params_hash(student.params) if student is not None else None,
        },
        "seed": trialset.seed,
        "manifest_hash": trialset.manifest_hash,
    }
    return report


# ---------------------------------------------------------------------------
# cross-talker similarity analysis
# ---------------------------------------------------------------------------

def crosstalk_analysis(
    manifest: CorpusManifest,
    teacher: Checkpoint,
    student: Checkpoint,
    n_examples: int = 100,
    seed: int = 0,
    ratio_db_range=(-5.0, 5.0),
    split: str = "eval",
) -> dict:
    """Mean cosine between mixture embeddings and the clean-source references.

    Per example the student slot that matches its reference better is
    reported first; the single teacher-on-mixture embedding is compared
    against the dominant (higher-power) and weaker sources.
    """
    pool = _speaker_pool(manifest, split=split)
    speakers = list(pool)
    if len(speakers) < 2:
        raise DegenerateInputError("crosstalk analysis needs >= 2 speakers")
    rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(f"{seed}:crosstalk".encode()).digest()[:8], "little")
    )
    teacher_enc, _, frontend = teacher_from_checkpoint(teacher)
    student_enc = student_from_checkpoint(student)

    keys = (
        "student_matched_1",
        "student_cross_12",
        "student_cross_21",
        "student_matched_2",
        "teacher_mix_dominant",
        "teacher_mix_weaker",
        "teacher_cross",
        "diagonal",
    )
    acc = {k: [] for k in keys}
    for _ in range(n_examples):
        idx = rng.choice(len(speakers), size=2, replace=False)
        s1, s2 = speakers[int(idx[0])], speakers[int(idx[1])]
        u1 = pool[s1][int(rng.integers(len(pool[s1])))]
        u2 = pool[s2][int(rng.integers(len(pool[s2])))]
        ratio = float(rng.uniform(*ratio_db_range))
        w1 = manifest.load_waveform(u1)
        w2 = manifest.load_waveform(u2)
        mix = mix_signals(w1, w2, ratio)
        ref1, _ = teacher_forward(teacher_enc, frontend.features(w1), utterance_id=u1)
        ref2, _ = teacher_forward(teacher_enc, frontend.features(w2), utterance_id=u2)
        mix_feats = frontend.features(mix)
        d_y, _ = teacher_forward(teacher_enc, mix_feats)
        slots, _ = student_forward(student_enc, mix_feats)

        cos = np.array([[cosine_similarity(sl.vector, rf.vector) for rf in (ref1, ref2)] for sl in slots])
        # greedy slot-to-reference pairing, then order so the better pair is first
        if cos[0, 0] + cos[1, 1] >= cos[0, 1] + cos[1, 0]:
            pairs = [(0, 0), (1, 1)]
        else:
            pairs = [(0, 1), (1, 0)]
        pairs.sort(key=lambda p: -cos[p])
        (i1, j1), (i2, j2) = pairs
        acc["student_matched_1"].append(cos[i1, j1])
        acc["student_cross_12"].append(cos[i1, j2])
        acc["student_cross_21"].append(cos[i2, j1])
        acc["student_matched_2"].append(cos[i2, j2])

        refs = (ref1, ref2)
        dom, weak = (0, 1) if ratio >= 0.0 else (1, 0)
        acc["teacher_mix_dominant"].append(cosine_similarity(d_y.vector, refs[dom].vector))
        acc["teacher_mix_weaker"].append(cosine_similarity(d_y.vector, refs[weak].vector))
        acc["teacher_cross"].append(cosine_similarity(ref1.vector, ref2.vector))
        acc["diagonal"].append(cosine_similarity(ref1.vector, ref1.vector))

    table = {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in acc.items()}
    table["n_examples"] = n_examples
    table["seed"] = seed
    table["ratio_db_range"] = list(ratio_db_range)
    return table
