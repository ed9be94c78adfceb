"""Seeded synthetic n-best corpora over a small agreement grammar.

References are topic-coherent sentences with determiner/noun and
subject/verb number agreement.  Hypotheses are corrupted copies; the
first-pass cost tracks the true edit distance plus Gaussian noise, so the
first-pass ranking is informative but imperfect.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from mwds.metrics import edit_distance
from mwds.nbest import Corpus, Hypothesis, Utterance, Vocab, build_vocab, save_corpus
from mwds.pipeline.config import SynthConfig

_TOPICS = [
    (["dog", "cat", "horse", "bird", "fox", "rabbit"],
     ["chase", "feed", "watch", "follow"], ["small", "wild", "hungry", "brown"]),
    (["apple", "cake", "soup", "bean", "pie", "lemon"],
     ["cook", "taste", "bake", "slice"], ["sweet", "fresh", "warm", "salty"]),
    (["train", "ticket", "station", "map", "bag", "road"],
     ["book", "pack", "reach", "cross"], ["early", "long", "crowded", "quiet"]),
    (["song", "guitar", "drum", "band", "note", "record"],
     ["play", "sing", "tune", "hear"], ["loud", "soft", "old", "classic"]),
    (["ball", "team", "goal", "coach", "match", "player"],
     ["kick", "win", "pass", "score"], ["fast", "strong", "final", "young"]),
    (["report", "desk", "file", "meeting", "email", "printer"],
     ["send", "print", "sign", "review"], ["urgent", "new", "short", "weekly"]),
    (["flower", "tree", "seed", "rose", "leaf", "fence"],
     ["plant", "water", "grow", "trim"], ["green", "tall", "bright", "tiny"]),
    (["lamp", "chair", "door", "window", "clock", "bed"],
     ["clean", "paint", "fix", "open"], ["dark", "broken", "white", "cozy"]),
]
_DET_SG = ["a", "this", "that", "every", "one", "each"]
_DET_PL = ["these", "those", "many", "some", "two", "few", "all"]
_DET_ANY = ["the", "my", "our", "your", "his", "her"]
_PREPS = ["near", "with", "for", "behind", "under", "from", "beside"]
_ADVS = ["today", "again", "now", "often", "later", "quickly", "slowly", "together"]
_FUNCTION = _DET_SG + _DET_PL + _DET_ANY + _PREPS + _ADVS + ["and"]
_WORDS_PER_TOPIC = 24


def _plural(word: str) -> str:
    if word.endswith(("s", "x", "ch", "sh")):
        return word + "es"
    if word == "leaf":
        return "leaves"
    return word + "s"


@dataclass
class Grammar:
    nouns: list[list[tuple[str, str]]]   # per topic: (singular, plural)
    verbs: list[list[tuple[str, str]]]   # per topic: (agrees with plural, with singular)
    adjs: list[list[str]]

    @classmethod
    def for_size(cls, vocab_words: int) -> "Grammar":
        topics = int(round((vocab_words - len(_FUNCTION)) / _WORDS_PER_TOPIC))
        topics = max(2, min(len(_TOPICS), topics))
        chosen = _TOPICS[:topics]
        return cls(
            nouns=[[(n, _plural(n)) for n in t[0]] for t in chosen],
            verbs=[[(v, _plural(v)) for v in t[1]] for t in chosen],
            adjs=[list(t[2]) for t in chosen],
        )

    @property
    def topics(self) -> int:
        return len(self.nouns)

    def lexicon(self) -> list[str]:
        words = list(_FUNCTION)
        for t in range(self.topics):
            words += [w for pair in self.nouns[t] for w in pair]
            words += [w for pair in self.verbs[t] for w in pair]
            words += self.adjs[t]
        return words

    def twins(self) -> dict[str, str]:
        """Number-flipped counterpart of every inflecting word."""
        out = {}
        for pairs in self.nouns + self.verbs:
            for a, b in pairs:
                out[a], out[b] = b, a
        for a, b in zip(_DET_SG, _DET_PL):
            out[a], out[b] = b, a
        return out

    def classes(self) -> dict[str, list[str]]:
        """Word -> same-class alternatives from other topics."""
        out: dict[str, list[str]] = {}
        for t in range(self.topics):
            others = [u for u in range(self.topics) if u != t]
            for k, (sg, pl) in enumerate(self.nouns[t]):
                out[sg] = [self.nouns[u][k][0] for u in others]
                out[pl] = [self.nouns[u][k][1] for u in others]
            for k, (base, third) in enumerate(self.verbs[t]):
                out[base] = [self.verbs[u][k][0] for u in others]
                out[third] = [self.verbs[u][k][1] for u in others]
            for k, adj in enumerate(self.adjs[t]):
                out[adj] = [self.adjs[u][k] for u in others]
        return out


class _Generator:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.g = Grammar.for_size(cfg.vocab_words)
        self.lexicon = self.g.lexicon()
        self.twins = self.g.twins()
        self.classes = self.g.classes()

    def _pick(self, items):
        return items[self.rng.integers(len(items))]

    def _det(self, plural: bool) -> str:
        pool = _DET_PL if plural else _DET_SG
        return self._pick(_DET_ANY) if self.rng.random() < 0.35 else self._pick(pool)

    def _noun_phrase(self, topic: int, plural: bool) -> list[str]:
        words = [self._det(plural)]
        if self.rng.random() < 0.3:
            words.append(self._pick(self.g.adjs[topic]))
        words.append(self._pick(self.g.nouns[topic])[int(plural)])
        return words

    def _verb(self, topic: int, subject_plural: bool) -> str:
        base, third = self._pick(self.g.verbs[topic])
        return base if subject_plural else third

    def sentence(self) -> list[str]:
        rng = self.rng
        while True:
            topic = int(rng.integers(self.g.topics))
            subj_pl = bool(rng.random() < 0.5)
            words = self._noun_phrase(topic, subj_pl)
            words.append(self._verb(topic, subj_pl))
            words += self._noun_phrase(topic, bool(rng.random() < 0.5))
            if rng.random() < 0.35:
                words.append(self._pick(_PREPS))
                words += self._noun_phrase(topic, bool(rng.random() < 0.5))
            if rng.random() < 0.3:
                words.append("and")
                words.append(self._verb(topic, subj_pl))
                words += self._noun_phrase(topic, bool(rng.random() < 0.5))
            if rng.random() < 0.3:
                words.append(self._pick(_ADVS))
            if self.cfg.min_len <= len(words) <= self.cfg.max_len:
                return words

    def _substitute(self, word: str) -> str:
        r = self.rng.random()
        if r < 0.4 and word in self.twins:
            return self.twins[word]
        if r < 0.7 and word in self.classes:
            return self._pick(self.classes[word])
        while True:
            alt = self._pick(self.lexicon)
            if alt != word:
                return alt

    def corrupt(self, ref: list[str], rate: float) -> list[str]:
        out: list[str] = []
        for word in ref:
            if self.rng.random() >= rate:
                out.append(word)
                continue
            op = self.rng.random()
            if op < 0.6:
                out.append(self._substitute(word))
            elif op < 0.8:
                continue
            else:
                out.append(word)
                pool = _FUNCTION if self.rng.random() < 0.5 else self.lexicon
                out.append(self._pick(pool))
        return out

    def utterance(self, uid: str) -> Utterance:
        cfg, rng = self.cfg, self.rng
        ref = self.sentence()
        hyps: list[list[str]] = []
        seen: set[str] = set()
        attempts = 0
        while len(hyps) < cfg.nbest_size:
            cand = self.corrupt(ref, cfg.corruption_rate)
            key = " ".join(cand)
            attempts += 1
            if key in seen and cfg.corruption_rate > 0 and attempts < 50 * cfg.nbest_size:
                continue
            seen.add(key)
            hyps.append(cand)
        entries = []
        for cand in hyps:
            dist = edit_distance(ref, cand)
            cost = (cfg.edit_cost * dist + cfg.score_noise * rng.standard_normal()
                    + cfg.length_penalty * len(cand))
            entries.append(Hypothesis(" ".join(cand), float(cost), None, dist))
        order = sorted(range(len(entries)), key=lambda i: entries[i].first_pass_score)
        return Utterance(uid, " ".join(ref), tuple(entries[i] for i in order))


SPLITS = ("train", "dev", "test")


def generate_corpora(cfg: SynthConfig) -> dict[str, Corpus]:
    """Build the three splits in memory; each split has its own seeded stream."""
    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    out = {}
    for k, split in enumerate(SPLITS):
        gen = _Generator(cfg, np.random.default_rng([cfg.seed, k]))
        utts = tuple(gen.utterance(f"{split}-{i:05d}") for i in range(sizes[split]))
        out[split] = Corpus(utts, split)
    return out


def generate_synthetic(cfg: SynthConfig, out_dir: str | os.PathLike,
                       vocab_max_size: int | None = None) -> dict[str, str]:
    """Write train/dev/test JSONL files and a vocabulary built from train."""
    os.makedirs(out_dir, exist_ok=True)
    corpora = generate_corpora(cfg)
    paths = {}
    for split, corpus in corpora.items():
        path = os.path.join(out_dir, f"{split}.jsonl")
        save_corpus(corpus, path)
        paths[split] = path
    size = vocab_max_size or len(Grammar.for_size(cfg.vocab_words).lexicon()) + 4
    vocab: Vocab = build_vocab(corpora["train"], size)
    paths["vocab"] = os.path.join(out_dir, "vocab.json")
    vocab.save(paths["vocab"])
    return paths
