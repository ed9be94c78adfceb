"""End-to-end teacher / baseline / distilled-student comparison on synthetic data."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mwds.nbest import Corpus, Vocab, load_corpus
from mwds.pipeline.config import InitFrom, Stage, SynthConfig, TrainConfig
from mwds.pipeline.rescoring import (
    evaluate,
    first_pass_selections,
    format_reports,
    rescore,
    tune_interpolation,
)
from mwds.pipeline.synth import generate_synthetic
from mwds.pipeline.train import cache_teacher_scores, distill, score_corpus, train
from mwds.scorer import ScorerConfig, ScorerModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    teacher: ScorerConfig = field(default_factory=lambda: ScorerConfig(
        layers=4, hidden_dim=64, heads=4, ffn_dim=128, max_len=32))
    student: ScorerConfig = field(default_factory=lambda: ScorerConfig(
        layers=1, hidden_dim=16, heads=2, ffn_dim=32, max_len=32))
    seeds: tuple[int, ...] = (1, 2, 3)
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=Stage.ADAPT, loss="mlm", batch_size=64, lr0=2e-3, lr_decay=0.9,
        max_epochs=4, patience=2))
    mwer: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=Stage.MWER, loss="mwer", batch_size=32, lr0=1e-3, lr_decay=0.9,
        max_epochs=15, patience=4))
    teacher_mwer: TrainConfig | None = field(default_factory=lambda: TrainConfig(
        stage=Stage.MWER, loss="mwer", batch_size=32, lr0=1e-3, lr_decay=0.9,
        max_epochs=12, patience=4))
    distill: TrainConfig = field(default_factory=lambda: TrainConfig(
        stage=Stage.DISTILL, loss="post_ce", temperature=2.0, batch_size=32, lr0=1e-3,
        lr_decay=0.9, max_epochs=15, patience=4))
    workers: int = 1


def _ckpt(out_dir, name):
    return os.path.join(out_dir, f"{name}.ckpt")


def _stage(cfg: TrainConfig, model: ScorerModel, train_c: Corpus, dev_c: Corpus,
           vocab: Vocab, out_dir: str, name: str) -> ScorerModel:
    t0 = time.time()
    result = train(cfg, model, train_c, dev_c, vocab)
    result.write_log(os.path.join(out_dir, f"{name}.log.jsonl"))
    save_checkpoint(result.model, _ckpt(out_dir, name))
    last = result.log[result.best_epoch]
    log.info("%s: best epoch %d of %d, dev loss %.4f, dev WER %s (%.1fs)", name,
             result.best_epoch, len(result.log) - 1, last.dev_loss, last.dev_wer,
             time.time() - t0)
    return result.model


def _tuned_test_selections(model, dev, test, vocab, workers):
    dev_scores = score_corpus(model, dev, vocab, workers)
    w1, w2 = tune_interpolation(dev, dev_scores)
    dev_sel = rescore(None, dev, w1, w2, scores=dev_scores).selections
    test_sel = rescore(model, test, w1, w2, vocab=vocab, workers=workers).selections
    return dev_sel, test_sel, (w1, w2)


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Train the teacher once, then a baseline and a distilled student per seed.

    Every artifact (corpora, vocabulary, logs, checkpoints, reports) goes
    under ``out_dir``; the returned summary is also written to summary.json.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    paths = generate_synthetic(cfg.synth, out_dir)
    train_c, dev_c, test_c = (load_corpus(paths[s]) for s in ("train", "dev", "test"))
    vocab = Vocab.load(paths["vocab"])
    V = len(vocab)

    teacher_cfg = replace(cfg.teacher, vocab_size=V, seed=cfg.synth.seed)
    teacher = ScorerModel(teacher_cfg)
    teacher = _stage(replace(cfg.adapt, seed=cfg.synth.seed), teacher, train_c, dev_c,
                     vocab, out_dir, "teacher_adapted")
    teacher_mwer = cfg.teacher_mwer or cfg.mwer
    teacher = _stage(replace(teacher_mwer, seed=cfg.synth.seed), teacher, train_c, dev_c,
                     vocab, out_dir, "teacher")
    train_t = cache_teacher_scores(teacher, train_c, vocab, cfg.workers)
    dev_t = cache_teacher_scores(teacher, dev_c, vocab, cfg.workers)
    t_dev_sel, t_test_sel, t_w = _tuned_test_selections(teacher, dev_c, test_c, vocab,
                                                        cfg.workers)

    summary = {"vocab_size": V, "teacher_weights": t_w, "seeds": {}}
    for seed in cfg.seeds:
        sdir = os.path.join(out_dir, f"seed{seed}")
        os.makedirs(sdir, exist_ok=True)
        student = ScorerModel(replace(cfg.student, vocab_size=V, seed=seed))
        _stage(replace(cfg.adapt, seed=seed), student, train_c, dev_c, vocab, sdir,
               "student_adapted")
        adapted = _ckpt(sdir, "student_adapted")
        baseline = _stage(
            replace(cfg.mwer, seed=seed, init_from=InitFrom.ADAPTED, init_checkpoint=adapted),
            load_checkpoint(adapted), train_c, dev_c, vocab, sdir, "baseline")
        dcfg = replace(cfg.distill, seed=seed, init_from=InitFrom.ADAPTED,
                       init_checkpoint=adapted)
        result, _, _ = distill(None, load_checkpoint(adapted), train_t, dev_t, vocab, dcfg)
        result.write_log(os.path.join(sdir, "distilled.log.jsonl"))
        save_checkpoint(result.model, _ckpt(sdir, "distilled"))

        _, b_test_sel, b_w = _tuned_test_selections(baseline, dev_c, test_c, vocab, cfg.workers)
        _, d_test_sel, d_w = _tuned_test_selections(result.model, dev_c, test_c, vocab,
                                                    cfg.workers)
        systems = {
            "first_pass": first_pass_selections(test_c),
            "teacher": t_test_sel,
            "baseline": b_test_sel,
            "distilled": d_test_sel,
        }
        reports = evaluate(systems, test_c, baseline="baseline", teacher="teacher",
                           students=["distilled"])
        table = format_reports(reports)
        log.info("seed %d\n%s", seed, table)
        with open(os.path.join(sdir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump({k: r.to_dict() for k, r in reports.items()}, fh, indent=1)
        summary["seeds"][seed] = {
            "weights": {"baseline": b_w, "distilled": d_w},
            "reports": {k: r.to_dict() for k, r in reports.items()},
        }
    summary["runtime_s"] = time.time() - t_start
    gaps = [s["reports"]["distilled"]["gap_closure_pct"] for s in summary["seeds"].values()]
    summary["mean_gap_closure_pct"] = (
        float(np.mean(gaps)) if gaps and all(g is not None for g in gaps) else None)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in summary.items() if k != "runtime_s"}, fh, indent=1,
                  sort_keys=True)
    return summary
