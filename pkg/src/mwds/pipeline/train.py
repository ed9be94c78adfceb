"""Training stages: domain adaptation, PLL distillation, MWER and distillation."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from mwds import losses as L
from mwds.metrics import corpus_wer
from mwds.nbest import Corpus, Vocab, tokenize
from mwds.pipeline.config import ConfigError, InitFrom, Stage, TrainConfig
from mwds.scorer import ScorerConfig, ScorerModel, load_checkpoint, pll_terms
from mwds.tensor import Tape

log = logging.getLogger(__name__)

SCORE_CHUNK = 256


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- scoring helpers ---------------------------------------------------------

def tokenize_corpus(corpus: Corpus, vocab: Vocab, max_len: int) -> list[list[list[int]]]:
    return [[tokenize(h.text, vocab, max_len) for h in u.nbest] for u in corpus]


def score_sequences(model: ScorerModel, seqs: Sequence[Sequence[int]],
                    workers: int = 1) -> np.ndarray:
    """Inference-mode scores in fixed-size chunks (results do not depend on ``workers``)."""
    chunks = [seqs[i:i + SCORE_CHUNK] for i in range(0, len(seqs), SCORE_CHUNK)]
    run = lambda c: model.score_batch(c).data.astype(np.float64)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def score_corpus(model: ScorerModel, corpus: Corpus, vocab: Vocab,
                 workers: int = 1) -> list[np.ndarray]:
    """Second-pass cost of every hypothesis, one array per utterance."""
    seqs = tokenize_corpus(corpus, vocab, model.cfg.max_len)
    flat = [s for utt in seqs for s in utt]
    scores = score_sequences(model, flat, workers)
    out, k = [], 0
    for utt in seqs:
        out.append(scores[k:k + len(utt)])
        k += len(utt)
    return out


def select(corpus: Corpus, scores: Sequence[np.ndarray], w1: float, w2: float) -> np.ndarray:
    """argmin of w1 * first_pass + w2 * second_pass per utterance; ties to lowest index."""
    return np.array(
        [int(np.argmin(w1 * u.first_pass() + w2 * np.asarray(s, dtype=np.float64)))
         for u, s in zip(corpus, scores, strict=True)],
        dtype=np.int64,
    )


def corpus_pll(model: ScorerModel, corpus: Corpus, vocab: Vocab) -> list[np.ndarray]:
    out = []
    for u in corpus:
        vals = []
        for h in u.nbest:
            ids = tokenize(h.text, vocab, model.cfg.max_len)
            vals.append(float(pll_terms(model, ids).sum()) if len(ids) > 1 else 0.0)
        out.append(np.array(vals))
    return out


# -- model initialisation ----------------------------------------------------

def init_model(cfg: TrainConfig, scorer_cfg: ScorerConfig) -> ScorerModel:
    if cfg.init_from is InitFrom.SCRATCH:
        return ScorerModel(replace(scorer_cfg, seed=cfg.seed))
    model = load_checkpoint(cfg.init_checkpoint)
    if model.cfg.vocab_size != scorer_cfg.vocab_size:
        raise ConfigError(
            f"checkpoint vocab size {model.cfg.vocab_size} != vocabulary {scorer_cfg.vocab_size}"
        )
    return model


# -- training loop -----------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float | None
    dev_loss: float
    dev_wer: float | None
    lr: float

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "train_loss": self.train_loss,
            "dev_loss": self.dev_loss, "dev_wer": self.dev_wer, "lr": self.lr,
        })


@dataclass
class TrainResult:
    model: ScorerModel
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in self.log:
                fh.write(rec.to_json() + "\n")


class _Task:
    """Stage-specific batching, loss and dev evaluation."""

    def __init__(self, cfg: TrainConfig, model: ScorerModel, corpus: Corpus,
                 dev: Corpus, vocab: Vocab, teacher_pll=None, dev_teacher_pll=None):
        self.cfg = cfg
        self.stage = cfg.stage
        self.spec = cfg.loss_spec()
        self.vocab = vocab
        self.corpus, self.dev = corpus, dev
        max_len = model.cfg.max_len
        if self.stage is Stage.ADAPT:
            self.items = [tokenize(u.reference, vocab, max_len) for u in corpus]
            self.dev_items = [tokenize(u.reference, vocab, max_len) for u in dev]
        elif self.stage is Stage.PLL_DISTILL:
            if teacher_pll is None or dev_teacher_pll is None:
                raise ConfigError("PLL distillation needs teacher PLLs")
            self.items = self._flat_hyps(corpus, teacher_pll, vocab, max_len)
            self.dev_items = self._flat_hyps(dev, dev_teacher_pll, vocab, max_len)
        else:
            if self.spec.needs_teacher:
                for c in (corpus, dev):
                    if any(u.teacher_scores() is None for u in c):
                        raise ConfigError("distillation loss needs cached teacher scores")
            self.seqs = tokenize_corpus(corpus, vocab, max_len)
            self.dev_seqs = tokenize_corpus(dev, vocab, max_len)
            if self.spec.kind is L.LossKind.MSE:
                self.items = [(i, j) for i, u in enumerate(corpus) for j in range(len(u))]
            else:
                self.items = list(range(len(corpus)))

    @staticmethod
    def _flat_hyps(corpus, plls, vocab, max_len):
        return [
            (tokenize(h.text, vocab, max_len), float(p))
            for utt, p_utt in zip(corpus, plls, strict=True)
            for h, p in zip(utt.nbest, p_utt, strict=True)
        ]

    # one minibatch -> loss tensor
    def batch_loss(self, model: ScorerModel, batch: list, rng: np.random.Generator):
        if self.stage is Stage.ADAPT:
            ids, pad, targets = L.mask_tokens(batch, model.cfg.vocab_size, rng)
            return L.mlm_loss(model, ids, pad, targets)
        if self.stage is Stage.PLL_DISTILL:
            scores = model.score_batch([ids for ids, _ in batch])
            return L.pll_distill_loss(scores, [p for _, p in batch])
        if self.spec.kind is L.LossKind.MSE:
            seqs = [self.seqs[i][j] for i, j in batch]
            target = [self.corpus[i].nbest[j].teacher_score for i, j in batch]
            return L.mse_loss(np.array(target), model.score_batch(seqs))
        return self._nbest_loss(model, self.corpus, self.seqs, batch)

    def _nbest_loss(self, model, corpus, seqs_all, batch):
        seqs = [s for i in batch for s in seqs_all[i]]
        scores = model.score_batch(seqs)
        students, teachers, k = [], [], 0
        for i in batch:
            u = corpus[i]
            n = len(u)
            sp = scores[k:k + n]
            k += n
            E = u.edit_distances()
            students.append(L.NBestScores(u.first_pass(), sp, E, self.cfg.w1, self.cfg.w2))
            ts = u.teacher_scores()
            teachers.append(None if ts is None else
                            L.NBestScores(u.first_pass(), ts, E, self.cfg.w1, self.cfg.w2))
        return L.batch_nbest_loss(self.spec, students, teachers)

    def dev_eval(self, model: ScorerModel) -> tuple[float, float | None]:
        """(dev loss, dev WER); WER only for n-best stages."""
        if self.stage is Stage.ADAPT:
            rng = np.random.default_rng(12345)
            total, count = 0.0, 0
            for start in range(0, len(self.dev_items), 256):
                chunk = self.dev_items[start:start + 256]
                ids, pad, targets = L.mask_tokens(chunk, model.cfg.vocab_size, rng)
                n = int((targets >= 0).sum())
                total += float(L.mlm_loss(model, ids, pad, targets).data) * n
                count += n
            return total / count, None
        if self.stage is Stage.PLL_DISTILL:
            scores = score_sequences(model, [ids for ids, _ in self.dev_items])
            target = np.array([p for _, p in self.dev_items])
            return float(np.mean((scores - target) ** 2)), None
        flat = [s for utt in self.dev_seqs for s in utt]
        scores = score_sequences(model, flat)
        per_utt, k = [], 0
        for utt in self.dev_seqs:
            per_utt.append(scores[k:k + len(utt)])
            k += len(utt)
        sel = select(self.dev, per_utt, self.cfg.w1, self.cfg.w2)
        wer = corpus_wer(self.dev, sel).wer
        loss = self._dev_loss(per_utt)
        return loss, wer

    def _dev_loss(self, per_utt) -> float:
        vals = []
        if self.spec.kind is L.LossKind.MSE:
            for u, s in zip(self.dev, per_utt):
                vals.extend((s - u.teacher_scores()) ** 2)
            return float(np.mean(vals))
        for u, s in zip(self.dev, per_utt):
            E = u.edit_distances()
            st = L.NBestScores(u.first_pass(), s, E, self.cfg.w1, self.cfg.w2)
            ts = u.teacher_scores()
            tt = None if ts is None else L.NBestScores(u.first_pass(), ts, E,
                                                       self.cfg.w1, self.cfg.w2)
            vals.append(float(L.combined_loss(self.spec, st, tt).data))
        return float(np.mean(vals))


def _metric(stage: Stage, dev_loss: float, dev_wer: float | None):
    if stage in (Stage.MWER, Stage.DISTILL):
        return (dev_wer, dev_loss)
    return (dev_loss,)


def train(cfg: TrainConfig, model: ScorerModel, corpus: Corpus, dev: Corpus,
          vocab: Vocab, *, teacher_pll=None, dev_teacher_pll=None,
          dev_metric: Callable[[int, float, float | None], tuple] | None = None,
          progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Adam with per-epoch LR decay and early stopping on the dev metric.

    The dev metric is evaluated before the first epoch and after every epoch;
    the returned model holds the best-dev parameters.  ``dev_metric`` may
    replace the default comparison key (dev WER then loss for n-best stages,
    dev loss otherwise).
    """
    if model.cfg.vocab_size != len(vocab):
        raise ConfigError(
            f"model vocab size {model.cfg.vocab_size} != vocabulary size {len(vocab)}"
        )
    task = _Task(cfg, model, corpus, dev, vocab, teacher_pll, dev_teacher_pll)
    rng = np.random.default_rng([cfg.seed, 7])
    opt = Adam(model.parameters(), cfg.lr0)
    result = TrainResult(model=model)

    def evaluate(epoch, train_loss, lr):
        dev_loss, dev_wer = task.dev_eval(model)
        if not math.isfinite(dev_loss):
            raise TrainingError(f"non-finite dev loss {dev_loss} at epoch {epoch}, lr {lr:g}")
        rec = EpochRecord(epoch, train_loss, dev_loss, dev_wer, lr)
        result.log.append(rec)
        if progress:
            progress(rec)
        key = dev_metric(epoch, dev_loss, dev_wer) if dev_metric else _metric(
            cfg.stage, dev_loss, dev_wer)
        return key

    best_key = evaluate(0, None, cfg.lr0)
    best_state = model.state()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cfg.lr0 * cfg.lr_decay ** (epoch - 1)
        opt.lr = lr
        order = rng.permutation(len(task.items))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [task.items[i] for i in order[start:start + cfg.batch_size]]
            with Tape() as tape:
                loss = task.batch_loss(model, batch, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr:g}"
                )
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            losses.append(value)
        key = evaluate(epoch, float(np.mean(losses)), lr)
        if key < best_key:
            best_key, best_state, stale = key, model.state(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for name, arr in best_state.items():
        model.params[name].data = arr
    return result


def cache_teacher_scores(teacher: ScorerModel, corpus: Corpus, vocab: Vocab,
                         workers: int = 1) -> Corpus:
    return corpus.with_teacher_scores(score_corpus(teacher, corpus, vocab, workers))


def distill(teacher: ScorerModel | None, student: ScorerModel, corpus: Corpus, dev: Corpus,
            vocab: Vocab, cfg: TrainConfig, workers: int = 1, **kwargs) -> tuple[TrainResult, Corpus, Corpus]:
    """Distil a (typically MWER-trained) teacher into ``student``.

    Teacher scores are computed once and cached into the returned corpora;
    without a teacher, cached scores must already be present.
    """
    spec = cfg.loss_spec()
    allowed = {L.LossKind.POST_CE, L.LossKind.POST_ORACLE, L.LossKind.NMSE,
               L.LossKind.MSE, L.LossKind.COMBO}
    if spec.kind not in allowed:
        raise ConfigError(f"loss {cfg.loss!r} is not a distillation loss")
    if teacher is not None:
        corpus = cache_teacher_scores(teacher, corpus, vocab, workers)
        dev = cache_teacher_scores(teacher, dev, vocab, workers)
    elif any(u.teacher_scores() is None for c in (corpus, dev) for u in c):
        raise ConfigError("no teacher checkpoint and no cached teacher_score in the corpus")
    cfg = replace(cfg, stage=Stage.DISTILL)
    return train(cfg, student, corpus, dev, vocab, **kwargs), corpus, dev
