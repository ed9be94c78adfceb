"""Edit distance, corpus WER, relative improvements and significance testing."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from mwds.kernels import edit_distance_ids, edit_distances_ids

if TYPE_CHECKING:
    from mwds.nbest import Corpus, Utterance


class MetricError(ValueError):
    """Invalid input to a metric (bad index, non-positive baseline, ...)."""


def _intern(*seqs: Sequence) -> list[np.ndarray]:
    table: dict = {}
    return [
        np.fromiter((table.setdefault(t, len(table)) for t in s), dtype=np.int64, count=len(s))
        for s in seqs
    ]


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Word-level Levenshtein distance with unit costs.

    Strings are split on whitespace; any other sequence is compared
    element-wise.
    """
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    a, b = _intern(ref, hyp)
    return edit_distance_ids(a, b)


def edit_distances(ref: Sequence, hyps: Sequence[Sequence]) -> np.ndarray:
    ref = ref.split() if isinstance(ref, str) else ref
    hyps = [h.split() if isinstance(h, str) else h for h in hyps]
    arrays = _intern(ref, *hyps)
    return edit_distances_ids(arrays[0], arrays[1:])


def oracle_index(utt: "Utterance") -> int:
    """Index of the minimum-edit-distance hypothesis; ties go to the lowest index."""
    return int(np.argmin(utt.edit_distances()))


@dataclass
class EvalReport:
    total_ref_tokens: int
    total_edits: int
    wer: float
    oracle_wer: float
    werr_vs_baseline: float | None = None
    gap_closure_pct: float | None = None
    p_value: float | None = None
    name: str | None = None
    werr_vs_first_pass: float | None = None

    def __post_init__(self):
        if self.oracle_wer > self.wer + 1e-12:
            raise MetricError("oracle WER cannot exceed system WER")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def utterance_errors(corpus: "Corpus", selections: Sequence[int]) -> np.ndarray:
    """Edit count of the selected hypothesis for every utterance."""
    if len(selections) != len(corpus):
        raise MetricError(
            f"{len(selections)} selections for a corpus of {len(corpus)} utterances"
        )
    out = np.empty(len(corpus), dtype=np.int64)
    for i, (utt, sel) in enumerate(zip(corpus, selections)):
        sel = int(sel)
        if not 0 <= sel < len(utt.nbest):
            raise MetricError(
                f"selection {sel} out of range for utterance {utt.id!r} (n={len(utt.nbest)})"
            )
        out[i] = utt.edit_distances()[sel]
    return out


def corpus_wer(corpus: "Corpus", selections: Sequence[int], name: str | None = None) -> EvalReport:
    """Micro-averaged WER of the selected hypotheses, with the n-best oracle WER."""
    errors = utterance_errors(corpus, selections)
    ref_tokens = corpus.ref_token_count()
    if ref_tokens <= 0:
        raise MetricError("corpus has no reference tokens")
    oracle_edits = sum(int(u.edit_distances().min()) for u in corpus)
    total = int(errors.sum())
    return EvalReport(
        total_ref_tokens=ref_tokens,
        total_edits=total,
        wer=100.0 * total / ref_tokens,
        oracle_wer=100.0 * oracle_edits / ref_tokens,
        name=name,
    )


def werr(baseline_wer: float, system_wer: float) -> float:
    """Relative WER change in percent; negative means the system is better."""
    if baseline_wer <= 0:
        raise MetricError(f"baseline WER must be positive, got {baseline_wer}")
    return 100.0 * (system_wer - baseline_wer) / baseline_wer


def gap_closure(teacher_wer: float, baseline_wer: float, student_wer: float) -> float:
    """Share (percent) of the teacher-baseline WER gap recovered by the student."""
    gap = baseline_wer - teacher_wer
    if gap <= 0:
        raise MetricError(
            f"teacher WER {teacher_wer} must be below baseline WER {baseline_wer}"
        )
    return 100.0 * (baseline_wer - student_wer) / gap


def matched_pairs_test(errors_a: Sequence[float], errors_b: Sequence[float]) -> float:
    """Two-sided matched-pairs test on per-utterance error counts.

    Normal approximation on the paired differences; segments are whole
    utterances.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"paired sequences differ in length: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise MetricError("matched-pairs test needs at least two segments")
    d = a - b
    if not d.any():
        return 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 0.0
    z = mean * math.sqrt(d.size) / sd
    return math.erfc(abs(z) / math.sqrt(2.0))
