"""Pipeline helpers and trend experiments behind the `reproduce` subcommand.

Each experiment trains the needed models at desk scale, evaluates them, and
renders a markdown report stating whether the expected directions hold:

* experiment 2: on m-vs-m trials, teacher-student training beats the
  classification-from-scratch baseline, and per-frame assignment (tPIT)
  beats per-utterance assignment (uPIT);
* experiment 3: routing mixtures through the student beats running the
  single-speaker extractor on them, which sits near chance on m-vs-m;
* experiment 4: each student slot is closer to its own speaker's reference
  than to the other speaker's, and the single-speaker extractor tracks the
  dominant speaker.

All runs are deterministic given the config; rerunning writes identical
bytes.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .audio import CorpusConfig, CorpusManifest, FrontEnd, build_corpus
from .model import EncoderConfig
from .trainer import TrainConfig, save_checkpoint, train_student, train_teacher
from .verify import crosstalk_analysis, evaluate, gen_trials

STUDENT_MODES = ("ts_tpit", "ts_upit", "aam_pit_tpit", "aam_pit_upit")


def corpus_config(run_cfg) -> CorpusConfig:
    a = run_cfg.audio
    return CorpusConfig(
        n_speakers=a.n_speakers,
        utterances_per_speaker=a.utterances_per_speaker,
        duration_s=a.duration_s,
        sample_rate=a.sample_rate,
        train_speakers=a.train_speakers,
    )


def frontend(run_cfg) -> FrontEnd:
    a = run_cfg.audio
    return FrontEnd(sample_rate=a.sample_rate, window_s=a.window_s, hop_s=a.hop_s, mel_bins=a.mel_bins)


def teacher_encoder_config(run_cfg) -> EncoderConfig:
    m = run_cfg.model
    return EncoderConfig(
        mel_bins=run_cfg.audio.mel_bins,
        channels=m.channels,
        n_blocks=m.n_blocks,
        embedding_dim=m.embedding_dim,
        n_outputs=1,
        kernel_width=m.kernel_width,
        local_tap_window=m.local_tap_window,
        dilations=m.dilations,
    )


def student_encoder_config(run_cfg) -> EncoderConfig:
    return dataclasses.replace(teacher_encoder_config(run_cfg), n_outputs=run_cfg.model.student_outputs)


def ensure_corpus(run_cfg, out_dir) -> CorpusManifest:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "corpus" / "manifest.jsonl"
    if manifest_path.exists():
        return CorpusManifest.load(manifest_path)
    return build_corpus(corpus_config(run_cfg), run_cfg.seed, out_dir / "corpus")


def teacher_train_config(run_cfg, seed=None) -> TrainConfig:
    cfg = TrainConfig.from_dict(run_cfg.training["teacher"])
    return dataclasses.replace(cfg, seed=run_cfg.seed if seed is None else seed)


def student_train_config(run_cfg, loss_mode=None, seed=None) -> TrainConfig:
    cfg = TrainConfig.from_dict(run_cfg.training["student"])
    if loss_mode is not None:
        cfg = dataclasses.replace(cfg, loss_mode=loss_mode)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _check(name, ok, detail):
    return {"name": name, "passed": bool(ok), "detail": detail}


def _fmt_checks(checks):
    lines = []
    for c in checks:
        mark = "PASS" if c["passed"] else "FAIL"
        lines.append(f"- [{mark}] {c['name']}: {c['detail']}")
    return "\n".join(lines)


def run_table2(run_cfg, out_dir) -> dict:
    """m-vs-m loss-mode comparison over the configured seeds."""
    out_dir = Path(out_dir)
    manifest = ensure_corpus(run_cfg, out_dir)
    teacher = train_teacher(manifest, teacher_encoder_config(run_cfg), teacher_train_config(run_cfg), frontend(run_cfg))
    save_checkpoint(teacher, out_dir / "teacher.ckpt")
    trials, mixtures = gen_trials(
        manifest, "mvm", run_cfg.trials.n_trials, run_cfg.seed, out_dir / "trials_mvm",
        ratio_db_range=tuple(run_cfg.trials.ratio_db_range),
    )
    trials.save(out_dir / "trials_mvm" / "trials_mvm.txt")
    s_enc = student_encoder_config(run_cfg)
    per_mode = {}
    for mode in STUDENT_MODES:
        rows = {}
        for seed in run_cfg.reproduce.seeds:
            student = train_student(teacher, manifest, s_enc, student_train_config(run_cfg, mode, seed))
            save_checkpoint(student, out_dir / f"student_{mode}_seed{seed}.ckpt")
            any_rep = evaluate(trials, [manifest, mixtures], teacher, student, mode="any_spk",
                               p_target=run_cfg.evaluation.p_target_multi)
            per_rep = evaluate(trials, [manifest, mixtures], teacher, student, mode="per_spk",
                               p_target=run_cfg.evaluation.p_target_multi)
            rows[str(seed)] = {
                "eer": any_rep["eer"],
                "min_dcf": any_rep["min_dcf"],
                "per_spk_eer": per_rep["eer"],
                "per_spk_min_dcf": per_rep["min_dcf"],
            }
        per_mode[mode] = {
            "seeds": rows,
            "mean_eer": float(np.mean([r["eer"] for r in rows.values()])),
            "mean_min_dcf": float(np.mean([r["min_dcf"] for r in rows.values()])),
            "mean_per_spk_eer": float(np.mean([r["per_spk_eer"] for r in rows.values()])),
        }
    ts_t = per_mode["ts_tpit"]["mean_eer"]
    ts_u = per_mode["ts_upit"]["mean_eer"]
    best_aam = min(per_mode["aam_pit_tpit"]["mean_eer"], per_mode["aam_pit_upit"]["mean_eer"])
    checks = [
        _check("teacher-student tPIT beats teacher-student uPIT", ts_t < ts_u, f"{ts_t:.4f} < {ts_u:.4f}"),
        _check(
            "teacher-student uPIT beats the best classification baseline",
            ts_u < best_aam,
            f"{ts_u:.4f} < {best_aam:.4f}",
        ),
        _check(
            "teacher-student tPIT leads the best baseline by >= 5 EER points",
            ts_t <= best_aam - 0.05,
            f"{ts_t:.4f} <= {best_aam:.4f} - 0.05",
        ),
    ]
    results = {
        "table": 2,
        "scenario": "mvm",
        "seeds": list(run_cfg.reproduce.seeds),
        "modes": per_mode,
        "checks": checks,
        "config": run_cfg.to_dict(),
    }
    _write_json(out_dir / "table2.json", results)
    (out_dir / "table2.md").write_text(render_table2(results))
    return results


def render_table2(results) -> str:
    lines = [
        "# Loss-mode comparison on m-vs-m trials (any-spk)",
        "",
        f"Seeds averaged: {results['seeds']}",
        "",
        "| loss | permutation | EER | minDCF | per-spk EER |",
        "|---|---|---|---|---|",
    ]
    naming = {
        "aam_pit_upit": ("classification", "uPIT"),
        "aam_pit_tpit": ("classification", "tPIT"),
        "ts_upit": ("teacher-student", "uPIT"),
        "ts_tpit": ("teacher-student", "tPIT"),
    }
    for mode in ("aam_pit_upit", "aam_pit_tpit", "ts_upit", "ts_tpit"):
        m = results["modes"][mode]
        loss, perm = naming[mode]
        lines.append(
            f"| {loss} | {perm} | {m['mean_eer']:.4f} | {m['mean_min_dcf']:.4f} | {m['mean_per_spk_eer']:.4f} |"
        )
    lines += ["", "## Expected directions", "", _fmt_checks(results["checks"]), ""]
    return "\n".join(lines)


def run_table3(run_cfg, out_dir) -> dict:
    """Extractor-routing comparison on s-vs-m and m-vs-m trials."""
    out_dir = Path(out_dir)
    manifest = ensure_corpus(run_cfg, out_dir)
    teacher = train_teacher(manifest, teacher_encoder_config(run_cfg), teacher_train_config(run_cfg), frontend(run_cfg))
    save_checkpoint(teacher, out_dir / "teacher.ckpt")
    student = train_student(
        teacher, manifest, student_encoder_config(run_cfg), student_train_config(run_cfg, "ts_tpit", run_cfg.seed)
    )
    save_checkpoint(student, out_dir / "student.ckpt")
    p_multi = run_cfg.evaluation.p_target_multi
    rows = {}
    for scenario in ("svm", "mvm"):
        trials, mixtures = gen_trials(
            manifest, scenario, run_cfg.trials.n_trials, run_cfg.seed, out_dir / f"trials_{scenario}",
            ratio_db_range=tuple(run_cfg.trials.ratio_db_range),
        )
        trials.save(out_dir / f"trials_{scenario}" / f"trials_{scenario}.txt")
        manifests = [manifest, mixtures]
        rows[f"teacher_teacher_{scenario}"] = evaluate(
            trials, manifests, teacher, None, mode="any_spk", p_target=p_multi, teacher_on_mixture=True
        )
        rows[f"teacher_student_{scenario}"] = evaluate(
            trials, manifests, teacher, student, mode="any_spk", p_target=p_multi
        )
        if scenario == "mvm":
            rows["student_student_mvm_per_spk"] = evaluate(
                trials, manifests, teacher, student, mode="per_spk", p_target=p_multi
            )
    tt_svm = rows["teacher_teacher_svm"]["eer"]
    st_svm = rows["teacher_student_svm"]["eer"]
    tt_mvm = rows["teacher_teacher_mvm"]["eer"]
    st_mvm = rows["teacher_student_mvm"]["eer"]
    checks = [
        _check("student on mixtures beats teacher on mixtures (s-vs-m)", st_svm < tt_svm, f"{st_svm:.4f} < {tt_svm:.4f}"),
        _check(
            "student m-vs-m sits >= 15 EER points below chance",
            st_mvm <= 0.35,
            f"{st_mvm:.4f} <= 0.35",
        ),
        _check(
            "teacher-only m-vs-m stays within 5 points of chance",
            abs(tt_mvm - 0.5) <= 0.05,
            f"|{tt_mvm:.4f} - 0.5| <= 0.05",
        ),
    ]
    results = {
        "table": 3,
        "rows": {k: {"eer": v["eer"], "min_dcf": v["min_dcf"], "mode": v["mode"]} for k, v in rows.items()},
        "checks": checks,
        "config": run_cfg.to_dict(),
    }
    _write_json(out_dir / "table3.json", results)
    (out_dir / "table3.md").write_text(render_table3(results))
    return results


def render_table3(results) -> str:
    r = results["rows"]
    lines = [
        "# Extractor routing on mixture trials (any-spk unless noted)",
        "",
        "| model on clean | model on mixture | scenario | EER | minDCF |",
        "|---|---|---|---|---|",
        f"| teacher | teacher | s-vs-m | {r['teacher_teacher_svm']['eer']:.4f} | {r['teacher_teacher_svm']['min_dcf']:.4f} |",
        f"| teacher | student | s-vs-m | {r['teacher_student_svm']['eer']:.4f} | {r['teacher_student_svm']['min_dcf']:.4f} |",
        f"| teacher | teacher | m-vs-m | {r['teacher_teacher_mvm']['eer']:.4f} | {r['teacher_teacher_mvm']['min_dcf']:.4f} |",
        f"| student | student | m-vs-m | {r['teacher_student_mvm']['eer']:.4f} | {r['teacher_student_mvm']['min_dcf']:.4f} |",
        f"| student | student | m-vs-m (per-spk) | {r['student_student_mvm_per_spk']['eer']:.4f} | {r['student_student_mvm_per_spk']['min_dcf']:.4f} |",
        "",
        "## Expected directions",
        "",
        _fmt_checks(results["checks"]),
        "",
    ]
    return "\n".join(lines)


def run_table4(run_cfg, out_dir) -> dict:
    """Cross-talker cosine structure of the mixture embeddings."""
    out_dir = Path(out_dir)
    manifest = ensure_corpus(run_cfg, out_dir)
    teacher = train_teacher(manifest, teacher_encoder_config(run_cfg), teacher_train_config(run_cfg), frontend(run_cfg))
    save_checkpoint(teacher, out_dir / "teacher.ckpt")
    student = train_student(
        teacher, manifest, student_encoder_config(run_cfg), student_train_config(run_cfg, "ts_tpit", run_cfg.seed)
    )
    save_checkpoint(student, out_dir / "student.ckpt")
    table = crosstalk_analysis(
        manifest,
        teacher,
        student,
        n_examples=run_cfg.reproduce.crosstalk_examples,
        seed=run_cfg.seed,
        ratio_db_range=tuple(run_cfg.trials.ratio_db_range),
    )
    checks = [
        _check(
            "slot 1 tracks its own speaker",
            table["student_matched_1"]["mean"] > table["student_cross_12"]["mean"],
            f"{table['student_matched_1']['mean']:.4f} > {table['student_cross_12']['mean']:.4f}",
        ),
        _check(
            "slot 2 tracks its own speaker",
            table["student_matched_2"]["mean"] > table["student_cross_21"]["mean"],
            f"{table['student_matched_2']['mean']:.4f} > {table['student_cross_21']['mean']:.4f}",
        ),
        _check(
            "teacher-on-mixture tracks the dominant speaker",
            table["teacher_mix_dominant"]["mean"] > table["teacher_mix_weaker"]["mean"],
            f"{table['teacher_mix_dominant']['mean']:.4f} > {table['teacher_mix_weaker']['mean']:.4f}",
        ),
        _check("reference self-similarity is exactly 1", table["diagonal"]["mean"] == 1.0, f"{table['diagonal']['mean']}"),
    ]
    results = {"table": 4, "similarities": table, "checks": checks, "config": run_cfg.to_dict()}
    _write_json(out_dir / "table4.json", results)
    (out_dir / "table4.md").write_text(render_table4(results))
    return results


def render_table4(results) -> str:
    t = results["similarities"]

    def cell(key):
        return f"{t[key]['mean']:.2f} ± {t[key]['std']:.2f}"

    lines = [
        "# Cross-talker cosine similarity of mixture embeddings",
        "",
        f"Examples: {t['n_examples']}, mixing ratios {t['ratio_db_range']} dB.",
        "Slot order per example puts the better-matched slot first; the",
        "teacher-on-mixture column is split by the dominant (higher-power) speaker.",
        "",
        "| reference | student slot 1 | student slot 2 | other reference | teacher on mixture |",
        "|---|---|---|---|---|",
        f"| speaker 1 | {cell('student_matched_1')} | {cell('student_cross_21')} | {cell('teacher_cross')} | {cell('teacher_mix_dominant')} (dominant) |",
        f"| speaker 2 | {cell('student_cross_12')} | {cell('student_matched_2')} | 1 (self) | {cell('teacher_mix_weaker')} (weaker) |",
        "",
        "## Expected directions",
        "",
        _fmt_checks(results["checks"]),
        "",
    ]
    return "\n".join(lines)


def run_table(table: int, run_cfg, out_dir) -> dict:
    if table == 2:
        return run_table2(run_cfg, out_dir)
    if table == 3:
        return run_table3(run_cfg, out_dir)
    if table == 4:
        return run_table4(run_cfg, out_dir)
    raise ValueError(f"no trend experiment for table {table}; choose 2, 3, or 4")
