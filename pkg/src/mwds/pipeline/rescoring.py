"""Rescoring, run-time interpolation tuning and multi-system evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mwds.metrics import (
    EvalReport,
    MetricError,
    corpus_wer,
    gap_closure,
    matched_pairs_test,
    utterance_errors,
    werr,
)
from mwds.nbest import Corpus, Vocab
from mwds.pipeline.train import score_corpus, select
from mwds.scorer import ScorerModel

log = logging.getLogger(__name__)

W2_GRID = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


@dataclass
class RescoreResult:
    selections: np.ndarray
    scores: list[np.ndarray]
    w1: float
    w2: float

    def to_json(self, corpus: Corpus) -> str:
        return json.dumps({
            "ids": [u.id for u in corpus],
            "selections": [int(s) for s in self.selections],
            "second_pass": [[float(v) for v in s] for s in self.scores],
            "w1": self.w1,
            "w2": self.w2,
        })


def rescore(model: ScorerModel | None, corpus: Corpus, w1: float, w2: float,
            vocab: Vocab | None = None, scores: Sequence[np.ndarray] | None = None,
            workers: int = 1) -> RescoreResult:
    """Pick argmin of w1 * first_pass + w2 * second_pass for every utterance.

    Pass precomputed ``scores`` to skip the model.
    """
    if scores is None:
        if model is None or vocab is None:
            raise ValueError("rescore needs a model and vocabulary, or precomputed scores")
        scores = score_corpus(model, corpus, vocab, workers)
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    return RescoreResult(select(corpus, scores, w1, w2), scores, w1, w2)


def tune_interpolation(dev: Corpus, scores: Sequence[np.ndarray],
                       grid: Sequence[float] = W2_GRID) -> tuple[float, float]:
    """Grid-search the second-pass weight on dev with the first-pass weight at 1.

    Ties go to the smaller weight.
    """
    best_w2, best_wer = None, None
    for w2 in sorted(grid):
        wer = corpus_wer(dev, select(dev, scores, 1.0, w2)).wer
        if best_wer is None or wer < best_wer:
            best_w2, best_wer = w2, wer
    return 1.0, float(best_w2)


def first_pass_selections(corpus: Corpus) -> np.ndarray:
    return np.array([int(np.argmin(u.first_pass())) for u in corpus], dtype=np.int64)


def oracle_selections(corpus: Corpus) -> np.ndarray:
    return np.array([int(np.argmin(u.edit_distances())) for u in corpus], dtype=np.int64)


def evaluate(systems: Mapping[str, Sequence[int]], corpus: Corpus,
             baseline: str | None = None, teacher: str | None = None,
             students: Sequence[str] = (), corpus_ids: Mapping[str, Sequence[str]] | None = None,
             ) -> dict[str, EvalReport]:
    """WER report for every system on one corpus.

    Adds WERR against the first pass and ``baseline``; for each name in
    ``students`` also the teacher-baseline gap closure and the matched-pairs
    p-value against the baseline.  ``corpus_ids`` (system -> utterance ids)
    guards against selections made on a different corpus.
    """
    ids = [u.id for u in corpus]
    if corpus_ids:
        for name, sys_ids in corpus_ids.items():
            if list(sys_ids) != ids:
                raise MetricError(f"system {name!r} was decoded on a different corpus")
    fp = corpus_wer(corpus, first_pass_selections(corpus))
    reports: dict[str, EvalReport] = {}
    errors: dict[str, np.ndarray] = {}
    for name, sel in systems.items():
        rep = corpus_wer(corpus, sel, name=name)
        errors[name] = utterance_errors(corpus, sel)
        if fp.wer > 0:
            rep.werr_vs_first_pass = werr(fp.wer, rep.wer)
        reports[name] = rep
    if baseline is not None:
        base = reports[baseline]
        for rep in reports.values():
            if base.wer > 0:
                rep.werr_vs_baseline = werr(base.wer, rep.wer)
        for name in students:
            rep = reports[name]
            rep.p_value = matched_pairs_test(errors[name], errors[baseline])
            if teacher is not None:
                try:
                    rep.gap_closure_pct = gap_closure(reports[teacher].wer, base.wer, rep.wer)
                except MetricError as exc:
                    log.warning("gap closure undefined for %s: %s", name, exc)
    return reports


def format_reports(reports: Mapping[str, EvalReport]) -> str:
    """Fixed-width table; WERR is signed, negative meaning fewer errors."""
    def fmt(v, spec="+.2f"):
        return "-" if v is None else format(v, spec)

    header = f"{'system':<16}{'WER':>8}{'oracle':>8}{'WERR/1st':>10}{'WERR/base':>11}{'gap%':>8}{'p':>9}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        lines.append(
            f"{name:<16}{r.wer:>8.2f}{r.oracle_wer:>8.2f}{fmt(r.werr_vs_first_pass):>10}"
            f"{fmt(r.werr_vs_baseline):>11}{fmt(r.gap_closure_pct, '.1f'):>8}"
            f"{fmt(r.p_value, '.4f'):>9}"
        )
    return "\n".join(lines)
