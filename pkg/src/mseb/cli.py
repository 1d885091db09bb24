"""Command-line surface: corpus synthesis, training, trials, evaluation, trends.

One binary with subcommands, driven by a JSON config file. Every field has a
default; unknown keys are rejected; the effective (post-default) config is
echoed into every output artifact. Reruns with identical inputs and seeds
write identical bytes. Log verbosity comes from the MSEB_LOG environment
variable (debug | info | warning); kernel selection from MSEB_NUMBA.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import _repro
from .audio import CorpusManifest, build_corpus
from .errors import ConfigError, MsebError
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_student, train_teacher
from .verify import ManifestChain, TrialSet, evaluate, gen_trials

log = logging.getLogger("mseb")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _check_keys(d, allowed, where):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in {where}")


def _section(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    _check_keys(d, [f.name for f in dataclasses.fields(cls)], where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


@dataclass(frozen=True)
class AudioSection:
    sample_rate: int = 16000
    duration_s: float = 2.0
    window_s: float = 0.020
    hop_s: float = 0.008
    mel_bins: int = 40  # low-frequency filters must resolve the pitch comb
    n_speakers: int = 20
    utterances_per_speaker: int = 30
    train_speakers: int = 14


@dataclass(frozen=True)
class ModelSection:
    channels: int = 48
    n_blocks: int = 3
    embedding_dim: int = 16
    kernel_width: int = 5
    local_tap_window: int = 11
    dilations: tuple = None  # per block; None picks 1, 4, 16, ...
    student_outputs: int = 2

    def __post_init__(self):
        if self.dilations is not None:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))


@dataclass(frozen=True)
class TrialsSection:
    n_trials: int = 300
    ratio_db_range: tuple = (-5.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "ratio_db_range", tuple(self.ratio_db_range))


@dataclass(frozen=True)
class EvalSection:
    p_target_single: float = 0.01
    p_target_multi: float = 0.05


@dataclass(frozen=True)
class ReproduceSection:
    seeds: tuple = (0, 1, 2)
    crosstalk_examples: int = 100

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))


_TEACHER_DEFAULTS = dict(
    epochs=20, batch_size=8, augment_prob=0.3, loss_mode="aam",
    speed_perturb=(0.88, 1.0, 1.14), seed=0,
)
_STUDENT_DEFAULTS = dict(
    epochs=60, batch_size=4, augment_prob=0.3, loss_mode="ts_tpit", target_refresh_epoch=10,
    speed_perturb=(0.88, 1.0, 1.14), seed=0,
)


def _train_section(d, defaults, where):
    merged = dict(defaults)
    if d is not None:
        if not isinstance(d, dict):
            raise ConfigError(f"{where} must be a JSON object")
        allowed = [f.name for f in dataclasses.fields(TrainConfig)]
        _check_keys(d, allowed, where)
        merged.update(d)
    try:
        return TrainConfig.from_dict(merged).to_dict()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    audio: AudioSection = field(default_factory=AudioSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: dict = field(default_factory=lambda: {
        "teacher": _train_section(None, _TEACHER_DEFAULTS, "training.teacher"),
        "student": _train_section(None, _STUDENT_DEFAULTS, "training.student"),
    })
    trials: TrialsSection = field(default_factory=TrialsSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    reproduce: ReproduceSection = field(default_factory=ReproduceSection)

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        _check_keys(d, ["seed", "audio", "model", "training", "trials", "evaluation", "reproduce"], "config root")
        training = d.get("training") or {}
        if not isinstance(training, dict):
            raise ConfigError("training must be a JSON object")
        _check_keys(training, ["teacher", "student"], "training")
        return cls(
            seed=int(d.get("seed", 0)),
            audio=_section(AudioSection, d.get("audio"), "audio"),
            model=_section(ModelSection, d.get("model"), "model"),
            training={
                "teacher": _train_section(training.get("teacher"), _TEACHER_DEFAULTS, "training.teacher"),
                "student": _train_section(training.get("student"), _STUDENT_DEFAULTS, "training.student"),
            },
            trials=_section(TrialsSection, d.get("trials"), "trials"),
            evaluation=_section(EvalSection, d.get("evaluation"), "evaluation"),
            reproduce=_section(ReproduceSection, d.get("reproduce"), "reproduce"),
        )

    @classmethod
    def load(cls, path=None, seed_override=None) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
            cfg = cls.from_dict(raw)
        if seed_override is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed_override))
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "audio": dataclasses.asdict(self.audio),
            "model": dataclasses.asdict(self.model),
            "training": {k: dict(v) for k, v in self.training.items()},
            "trials": {"n_trials": self.trials.n_trials, "ratio_db_range": list(self.trials.ratio_db_range)},
            "evaluation": dataclasses.asdict(self.evaluation),
            "reproduce": {
                "seeds": list(self.reproduce.seeds),
                "crosstalk_examples": self.reproduce.crosstalk_examples,
            },
        }


def _echo_config(cfg: RunConfig, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = Path(args.out)
    manifest = build_corpus(_repro.corpus_config(cfg), cfg.seed, out)
    _echo_config(cfg, out)
    log.info("wrote %d utterances under %s", len(manifest), out)
    print(f"corpus: {len(manifest)} utterances -> {out / 'manifest.jsonl'}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    manifest = CorpusManifest.load(args.corpus)
    out = Path(args.out)
    ckpt = train_teacher(
        manifest,
        _repro.teacher_encoder_config(cfg),
        _repro.teacher_train_config(cfg),
        _repro.frontend(cfg),
        out_dir=out,
    )
    _echo_config(cfg, out)
    final = ckpt.metrics[-1]
    print(f"teacher: epoch {ckpt.epoch} loss {final['loss']:.4f} accuracy {final['accuracy']:.3f} -> {out / 'teacher.ckpt'}")
    return 0


def cmd_train_student(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    manifest = CorpusManifest.load(args.corpus)
    teacher = load_checkpoint(args.teacher)
    out = Path(args.out)
    train_cfg = _repro.student_train_config(cfg, loss_mode=args.loss_mode, seed=cfg.seed)
    ckpt = train_student(teacher, manifest, _repro.student_encoder_config(cfg), train_cfg, out_dir=out)
    _echo_config(cfg, out)
    print(f"student[{train_cfg.loss_mode}]: epoch {ckpt.epoch} loss {ckpt.metrics[-1]['loss']:.4f} -> {out / 'student.ckpt'}")
    return 0


def cmd_trials(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    manifest = CorpusManifest.load(args.manifest)
    out = Path(args.out)
    trialset, _ = gen_trials(
        manifest, args.scenario, cfg.trials.n_trials, cfg.seed, out,
        ratio_db_range=tuple(cfg.trials.ratio_db_range),
    )
    trials_path = out / f"trials_{args.scenario}.txt"
    trialset.save(trials_path)
    _echo_config(cfg, out)
    print(f"trials: {len(trialset.trials)} ({trialset.n_target} target / {trialset.n_nontarget} nontarget) -> {trials_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    trials_path = Path(args.trials)
    trialset = TrialSet.load(trials_path)
    manifests = [CorpusManifest.load(args.manifest)]
    mixtures_path = trials_path.parent / "mixtures.jsonl"
    if mixtures_path.exists():
        manifests.append(CorpusManifest.load(mixtures_path))
    teacher = load_checkpoint(args.teacher)
    student = load_checkpoint(args.student) if args.student else None
    p_target = cfg.evaluation.p_target_single if trialset.scenario == "svs" else cfg.evaluation.p_target_multi
    report = evaluate(
        trialset,
        ManifestChain(*manifests),
        teacher,
        student,
        mode=args.mode,
        p_target=p_target,
        teacher_on_mixture=args.teacher_on_mixture,
    )
    report["config"] = cfg.to_dict()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(f"eval[{trialset.scenario}/{args.mode}]: EER {report['eer']:.4f} minDCF {report['min_dcf']:.4f} -> {out}")
    return 0


def cmd_reproduce(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = Path(args.out)
    results = _repro.run_table(int(args.table), cfg, out)
    _echo_config(cfg, out)
    failed = [c for c in results["checks"] if not c["passed"]]
    for c in results["checks"]:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: {c['detail']}")
    print(f"report -> {out / f'table{args.table}.md'}")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mseb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("synth", help="synthesize the speaker corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-teacher", help="train the single-speaker extractor")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus manifest.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train the mixture extractor")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-mode", choices=["ts_tpit", "ts_upit", "aam_pit_tpit", "aam_pit_upit"])
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("trials", help="generate a verification trial set")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenario", required=True, choices=["svs", "svm", "mvm"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("eval", help="score a trial set and report EER / minDCF")
    common(p)
    p.add_argument("--trials", required=True, help="trial text file")
    p.add_argument("--manifest", required=True, help="corpus manifest.jsonl")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student")
    p.add_argument("--mode", default="any_spk", choices=["any_spk", "per_spk"])
    p.add_argument("--teacher-on-mixture", action="store_true", help="run the teacher on mixture sides")
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="run a desk-scale trend experiment")
    common(p)
    p.add_argument("--table", required=True, choices=["2", "3", "4"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MSEB_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MsebError as e:
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0]}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
