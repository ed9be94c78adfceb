"""Utterances, n-best hypotheses, vocabulary and JSONL corpus I/O."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from mwds.metrics import edit_distance

log = logging.getLogger(__name__)

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
RESERVED = (PAD, UNK, CLS, MASK)
PAD_ID, UNK_ID, CLS_ID, MASK_ID = 0, 1, 2, 3

N_MAX = 10
MAX_LEN = 32

_HYP_KEYS = ("text", "first_pass_score", "teacher_score")
_UTT_KEYS = ("id", "reference", "nbest")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data."""


@dataclass(frozen=True)
class Hypothesis:
    text: str
    first_pass_score: float
    teacher_score: float | None = None
    cached_edit_distance: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.first_pass_score):
            raise CorpusError(f"non-finite first_pass_score in {self.text!r}")


@dataclass(frozen=True)
class Utterance:
    id: str
    reference: str
    nbest: tuple[Hypothesis, ...]

    def __post_init__(self):
        if not self.nbest:
            raise CorpusError(f"utterance {self.id!r} has an empty n-best")

    def __len__(self) -> int:
        return len(self.nbest)

    def edit_distances(self) -> np.ndarray:
        ref = self.reference.split()
        return np.array(
            [
                h.cached_edit_distance
                if h.cached_edit_distance is not None
                else edit_distance(ref, h.text.split())
                for h in self.nbest
            ],
            dtype=np.int64,
        )

    def first_pass(self) -> np.ndarray:
        return np.array([h.first_pass_score for h in self.nbest], dtype=np.float64)

    def teacher_scores(self) -> np.ndarray | None:
        scores = [h.teacher_score for h in self.nbest]
        if any(s is None for s in scores):
            return None
        return np.array(scores, dtype=np.float64)

    def with_edit_distances(self) -> "Utterance":
        dists = self.edit_distances()
        return replace(
            self,
            nbest=tuple(
                replace(h, cached_edit_distance=int(d)) for h, d in zip(self.nbest, dists)
            ),
        )


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    split: str | None = None

    def __post_init__(self):
        if not self.utterances:
            raise CorpusError("empty corpus")
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise CorpusError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    def ref_token_count(self) -> int:
        return sum(len(u.reference.split()) for u in self.utterances)

    def with_teacher_scores(self, scores: Sequence[Sequence[float]]) -> "Corpus":
        utts = []
        for u, s in zip(self.utterances, scores, strict=True):
            if len(s) != len(u.nbest):
                raise CorpusError(f"teacher score count mismatch for {u.id!r}")
            utts.append(replace(u, nbest=tuple(
                replace(h, teacher_score=float(v)) for h, v in zip(u.nbest, s))))
        return Corpus(tuple(utts), self.split)


# -- JSONL I/O ---------------------------------------------------------------

def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CorpusError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _parse_hypothesis(obj, where: str) -> Hypothesis:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: hypothesis must be an object")
    unknown = set(obj) - set(_HYP_KEYS)
    if unknown:
        raise CorpusError(f"{where}: unknown hypothesis field(s) {sorted(unknown)}")
    if not isinstance(obj.get("text"), str):
        raise CorpusError(f"{where}: hypothesis text must be a string")
    if "first_pass_score" not in obj:
        raise CorpusError(f"{where}: missing first_pass_score")
    teacher = obj.get("teacher_score")
    return Hypothesis(
        text=obj["text"],
        first_pass_score=_number(obj["first_pass_score"], where),
        teacher_score=None if teacher is None else _number(teacher, where),
    )


def parse_utterance(line: str, lineno: int = 1, n_max: int = N_MAX) -> Utterance:
    where = f"line {lineno}"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: expected a JSON object")
    unknown = set(obj) - set(_UTT_KEYS)
    if unknown:
        raise CorpusError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in _UTT_KEYS if k not in obj]
    if missing:
        raise CorpusError(f"{where}: missing field(s) {missing}")
    if not isinstance(obj["id"], str) or not isinstance(obj["reference"], str):
        raise CorpusError(f"{where}: id and reference must be strings")
    nbest = obj["nbest"]
    if not isinstance(nbest, list) or not 1 <= len(nbest) <= n_max:
        size = len(nbest) if isinstance(nbest, list) else "?"
        raise CorpusError(f"{where}: n-best size {size} outside [1, {n_max}]")
    hyps = tuple(_parse_hypothesis(h, where) for h in nbest)
    return Utterance(obj["id"], obj["reference"], hyps)


def load_corpus(path: str | os.PathLike, split: str | None = None,
                n_max: int = N_MAX) -> Corpus:
    """Read a JSONL corpus, validating every line and caching edit distances."""
    utts: list[Utterance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                raise CorpusError(f"line {lineno}: blank line")
            utt = parse_utterance(line, lineno, n_max)
            if utt.id in seen:
                raise CorpusError(f"line {lineno}: duplicate utterance id {utt.id!r}")
            seen.add(utt.id)
            utts.append(utt.with_edit_distances())
    if not utts:
        raise CorpusError("empty corpus")
    if split is None:
        stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
        split = stem if stem in ("train", "dev", "test") else None
    return Corpus(tuple(utts), split)


def format_utterance(utt: Utterance) -> str:
    obj = {
        "id": utt.id,
        "reference": utt.reference,
        "nbest": [
            {
                "text": h.text,
                "first_pass_score": float(h.first_pass_score),
                "teacher_score": None if h.teacher_score is None else float(h.teacher_score),
            }
            for h in utt.nbest
        ],
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_corpus(corpus: Corpus | Iterable[Utterance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in corpus:
            fh.write(format_utterance(utt))
            fh.write("\n")


# -- vocabulary --------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    """Token list indexed by id; the first four entries are the reserved tokens."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise ValueError(f"vocab must start with {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def to_json(self) -> str:
        return json.dumps(list(self.tokens), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(tuple(json.loads(text)))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def build_vocab(corpus: Corpus, max_size: int) -> Vocab:
    """Most frequent whitespace tokens (ties lexicographic) after the reserved four."""
    # max_size == 4 leaves only the reserved tokens; all text then maps to [UNK]
    if max_size < 4:
        raise ValueError(f"max_size must be at least 4, got {max_size}")
    counts: Counter[str] = Counter()
    for utt in corpus:
        counts.update(utt.reference.split())
        for h in utt.nbest:
            counts.update(h.text.split())
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab(RESERVED + tuple(keep))


class _TruncationCounter:
    def __init__(self):
        self.count = 0


truncations = _TruncationCounter()


def tokenize(text: str, vocab: Vocab, max_len: int = MAX_LEN) -> list[int]:
    """[CLS] followed by word ids; out-of-vocabulary words map to [UNK]."""
    ids = [CLS_ID] + [vocab.id(w) for w in text.split()]
    # tokens that collide with the reserved names are ordinary unknown words
    ids[1:] = [UNK_ID if i in (PAD_ID, MASK_ID, CLS_ID) else i for i in ids[1:]]
    if len(ids) > max_len:
        truncations.count += 1
        log.warning("truncating %d tokens to %d", len(ids), max_len)
        ids = ids[:max_len]
    return ids
