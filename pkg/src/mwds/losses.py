"""Training objectives over n-best lists and masked sequences.

Scores are costs: the n-best posterior is softmax(-s / T), so a lower cost
means a more probable hypothesis.  Teacher quantities are constants.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mwds import tensor as T
from mwds.nbest import MASK_ID, PAD_ID
from mwds.tensor import Tensor

TRAIN_W1 = 20.0
TRAIN_W2 = 1.0


class LossError(ValueError):
    """A loss was requested with inputs that cannot produce it."""


class LossKind(str, enum.Enum):
    MLM = "mlm"
    PLL_DISTILL = "pll_distill"
    MWER = "mwer"
    POST_CE = "post_ce"
    POST_ORACLE = "post_oracle"
    NMSE = "nmse"
    MSE = "mse"
    COMBO = "combo"


# named linear combinations; values are weight names or literal floats
COMBOS: dict[str, dict[str, str | float]] = {
    "nmse+mwer": {"nmse": "beta", "mwer": 1.0},
    "post_ce+nmse": {"post_ce": 1.0, "nmse": "beta"},
    "post_ce+mwer": {"post_ce": 1.0, "mwer": "beta"},
    "post_ce+nmse+mwer": {"post_ce": "gamma", "nmse": "beta", "mwer": "gamma"},
}

_NBEST_COMPONENTS = {LossKind.MWER, LossKind.POST_CE, LossKind.POST_ORACLE,
                     LossKind.NMSE, LossKind.MSE}


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MWER
    temperature: float = 2.0
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.5
    weights: Mapping[LossKind, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not self.temperature > 0:
            raise LossError(f"temperature must be positive, got {self.temperature}")
        weights = {LossKind(k): float(v) for k, v in dict(self.weights).items()}
        if self.kind is LossKind.COMBO:
            bad = set(weights) - _NBEST_COMPONENTS
            if bad:
                raise LossError(f"components {sorted(k.value for k in bad)} cannot be combined")
            if any(v < 0 for v in weights.values()) or not any(v > 0 for v in weights.values()):
                raise LossError("combo weights must be non-negative with at least one positive")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_name(cls, name: str, temperature: float = 2.0, alpha: float = 1.0,
                  beta: float = 0.01, gamma: float = 0.5) -> "LossSpec":
        """Build a spec from a config name such as ``"post_ce"`` or ``"post_ce+nmse"``."""
        params = {"temperature": temperature, "alpha": alpha, "beta": beta, "gamma": gamma}
        name = name.strip().lower()
        if name in COMBOS:
            weights = {
                LossKind(k): params[v] if isinstance(v, str) else v
                for k, v in COMBOS[name].items()
            }
            return cls(LossKind.COMBO, weights=weights, **params)
        try:
            kind = LossKind(name)
        except ValueError:
            known = sorted([k.value for k in LossKind if k is not LossKind.COMBO] + list(COMBOS))
            raise LossError(f"unknown loss {name!r}; expected one of {known}") from None
        if kind is LossKind.COMBO:
            raise LossError("use a named combination, e.g. 'post_ce+nmse'")
        return cls(kind, **params)

    def components(self) -> dict[LossKind, float]:
        if self.kind is LossKind.COMBO:
            return dict(self.weights)
        return {self.kind: 1.0}

    @property
    def needs_teacher(self) -> bool:
        return any(k in (LossKind.POST_CE, LossKind.POST_ORACLE, LossKind.NMSE, LossKind.MSE)
                   for k in self.components())

    @property
    def needs_edit_distances(self) -> bool:
        return any(k in (LossKind.MWER, LossKind.POST_ORACLE) for k in self.components())


@dataclass
class NBestScores:
    """First- and second-pass costs of one n-best list.

    ``second_pass`` may be a tensor (student, differentiable) or an array
    (teacher, constant).
    """

    first_pass: np.ndarray
    second_pass: Tensor | np.ndarray
    edit_distances: np.ndarray | None = None
    w1: float = TRAIN_W1
    w2: float = TRAIN_W2

    def __post_init__(self):
        self.first_pass = np.asarray(self.first_pass, dtype=np.float64)
        n = self.first_pass.shape[0]
        if n < 1 or len(self.second_pass) != n:
            raise LossError(
                f"first/second pass lengths differ: {n} vs {len(self.second_pass)}"
            )
        if self.edit_distances is not None:
            self.edit_distances = np.asarray(self.edit_distances, dtype=np.float64)
            if self.edit_distances.shape != (n,):
                raise LossError("edit distance count does not match the n-best size")

    def __len__(self) -> int:
        return self.first_pass.shape[0]

    def interpolated(self) -> Tensor:
        """s_j = w1 * first_pass_j + w2 * second_pass_j."""
        sp = T.as_tensor(self.second_pass)
        return sp * self.w2 + T.Tensor(self.w1 * self.first_pass, dtype=sp.dtype)

    def interpolated_values(self) -> np.ndarray:
        sp = self.second_pass.data if isinstance(self.second_pass, Tensor) else self.second_pass
        return self.w1 * self.first_pass + self.w2 * np.asarray(sp, dtype=np.float64)


def _costs(scores) -> Tensor:
    if isinstance(scores, NBestScores):
        return scores.interpolated()
    return T.as_tensor(scores)


def log_posterior(scores, temperature: float = 1.0) -> Tensor:
    """log softmax(-s / T) over the n-best."""
    return T.log_softmax_rows(_costs(scores) * (-1.0 / temperature))


def nbest_posterior(scores, temperature: float = 1.0) -> Tensor:
    """Posterior over the n-best from costs: exp(-s_j/T) / sum_k exp(-s_k/T)."""
    if not temperature > 0:
        raise LossError(f"temperature must be positive, got {temperature}")
    return T.softmax_rows(_costs(scores) * (-1.0 / temperature))


def _teacher_posterior(teacher: NBestScores, temperature: float) -> np.ndarray:
    s = -teacher.interpolated_values() / temperature
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def _require_distances(ns: NBestScores, what: str) -> np.ndarray:
    if ns.edit_distances is None:
        raise LossError(f"{what} needs edit distances")
    return ns.edit_distances


def mwer_loss(ns: NBestScores) -> Tensor:
    """Expected edit distance relative to the n-best mean, under softmax(-s)."""
    E = _require_distances(ns, "MWER")
    p = nbest_posterior(ns, 1.0)
    centred = T.Tensor(E - E.mean(), dtype=p.dtype)
    return (p * centred).sum()


def posterior_ce_loss(student: NBestScores, teacher: NBestScores, temperature: float) -> Tensor:
    """Cross-entropy of the student's n-best posterior against the teacher's."""
    if len(student) != len(teacher):
        raise LossError("student and teacher n-best sizes differ")
    logp = log_posterior(student, temperature)
    q = T.Tensor(_teacher_posterior(teacher, temperature), dtype=logp.dtype)
    return -(logp * q).sum()


def oracle_correction(student: NBestScores) -> Tensor:
    """-log p_student(oracle) at temperature 1; ties pick the lowest index."""
    E = _require_distances(student, "the oracle correction")
    logp = log_posterior(student, 1.0)
    return -logp[int(np.argmin(E))]


def oracle_corrected_loss(student: NBestScores, teacher: NBestScores,
                          temperature: float, alpha: float) -> Tensor:
    loss = posterior_ce_loss(student, teacher, temperature)
    if alpha == 0:
        return loss
    return loss + oracle_correction(student) * alpha


def nbest_mse_loss(teacher: NBestScores, student: NBestScores) -> Tensor:
    """Mean squared difference of interpolated costs over one n-best list."""
    if len(student) != len(teacher):
        raise LossError("student and teacher n-best sizes differ")
    s = student.interpolated()
    diff = s - T.Tensor(teacher.interpolated_values(), dtype=s.dtype)
    return (diff * diff).mean()


def mse_loss(teacher_hat, student_hat) -> Tensor:
    """Mean squared difference of second-pass costs over independent samples."""
    student_hat = T.as_tensor(student_hat)
    teacher_hat = np.asarray(
        teacher_hat.data if isinstance(teacher_hat, Tensor) else teacher_hat, dtype=np.float64
    )
    if student_hat.shape != teacher_hat.shape or student_hat.ndim != 1:
        raise LossError(f"shape mismatch {teacher_hat.shape} vs {student_hat.shape}")
    diff = student_hat - T.Tensor(teacher_hat, dtype=student_hat.dtype)
    return (diff * diff).mean()


def _component(kind: LossKind, spec: LossSpec, student: NBestScores,
               teacher: NBestScores | None) -> Tensor:
    if kind is LossKind.MWER:
        return mwer_loss(student)
    if teacher is None:
        raise LossError(f"{kind.value} needs teacher scores")
    if kind is LossKind.POST_CE:
        return posterior_ce_loss(student, teacher, spec.temperature)
    if kind is LossKind.POST_ORACLE:
        return oracle_corrected_loss(student, teacher, spec.temperature, spec.alpha)
    if kind is LossKind.NMSE:
        return nbest_mse_loss(teacher, student)
    if kind is LossKind.MSE:
        return mse_loss(teacher.second_pass, student.second_pass)
    raise LossError(f"{kind.value} is not an n-best loss")


def combined_loss(spec: LossSpec, student: NBestScores,
                  teacher: NBestScores | None = None) -> Tensor:
    """Weighted sum of the spec's components on one n-best list."""
    comps = spec.components()
    if any(k in (LossKind.MWER, LossKind.POST_ORACLE) for k in comps) and (
        student.edit_distances is None
    ):
        raise LossError("MWER-based components need edit distances")
    total = None
    for kind, weight in comps.items():
        if weight == 0:
            continue
        term = _component(kind, spec, student, teacher) * weight
        total = term if total is None else total + term
    if total is None:
        return T.Tensor(0.0) * 0.0
    return total


def batch_nbest_loss(spec: LossSpec, students: Sequence[NBestScores],
                     teachers: Sequence[NBestScores | None] | None = None) -> Tensor:
    """Mean of per-utterance losses over a batch of n-best lists."""
    if not students:
        raise LossError("empty batch")
    teachers = teachers or [None] * len(students)
    terms = [combined_loss(spec, s, t) for s, t in zip(students, teachers, strict=True)]
    return T.stack(terms).mean()


# -- masked LM ---------------------------------------------------------------

def mask_tokens(seqs: Sequence[Sequence[int]], vocab_size: int, rng: np.random.Generator,
                rate: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style masking of non-[CLS] positions.

    Returns padded masked ids, the padding mask, and targets (-1 where no
    prediction is made).  Every sequence with at least one token gets at
    least one prediction.
    """
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    pad = np.zeros((len(seqs), width), dtype=bool)
    targets = np.full((len(seqs), width), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)
        ids[i, : len(s)] = s
        pad[i, : len(s)] = True
        n = len(s) - 1
        if n <= 0:
            continue
        chosen = np.flatnonzero(rng.random(n) < rate) + 1
        if chosen.size == 0:
            chosen = np.array([1 + rng.integers(n)])
        targets[i, chosen] = s[chosen]
        action = rng.random(chosen.size)
        random_ids = rng.integers(4, max(vocab_size, 5), size=chosen.size)
        for pos, a, r in zip(chosen, action, random_ids):
            if a < 0.8:
                ids[i, pos] = MASK_ID
            elif a < 0.9:
                ids[i, pos] = r if vocab_size > 4 else MASK_ID
    return ids, pad, targets


def masked_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows."""
    logp = T.log_softmax_rows(logits)
    picked = logp[np.arange(len(labels)), np.asarray(labels)]
    return -picked.mean()


def mlm_loss(model, masked_ids: np.ndarray, pad_mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of the MLM head over positions with a target."""
    rows, cols = np.nonzero(targets >= 0)
    if rows.size == 0:
        raise LossError("MLM batch has no masked positions")
    logits = model.mlm_logits_at(masked_ids, pad_mask, rows, cols)
    return masked_cross_entropy(logits, targets[rows, cols])


def pll_distill_loss(student_cls_score, teacher_pll) -> Tensor:
    """Squared error between CLS scores and teacher PLLs, averaged over items."""
    s = T.as_tensor(student_cls_score)
    target = np.asarray(teacher_pll, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise LossError("teacher PLL must be finite")
    if s.ndim == 0:
        s = s.reshape(1)
        target = target.reshape(1)
    diff = s - T.Tensor(target, dtype=s.dtype)
    return (diff * diff).mean()

