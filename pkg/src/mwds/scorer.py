"""Small bidirectional transformer encoder that scores token sequences.

The final-layer [CLS] embedding feeds a single affine map to a scalar cost;
the token embedding matrix doubles as the MLM output projection.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from mwds import tensor as T
from mwds.nbest import CLS_ID, MASK_ID, PAD_ID
from mwds.tensor import Tensor

MAGIC = b"MWDS"
FORMAT_VERSION = 1


class ScorerError(ValueError):
    """Invalid scorer input or checkpoint."""


@dataclass(frozen=True)
class ScorerConfig:
    layers: int = 2
    hidden_dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 64
    max_len: int = 32
    seed: int = 0

    def __post_init__(self):
        for f in ("layers", "hidden_dim", "heads", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, f) <= 0:
                raise ScorerError(f"{f} must be positive")
        if self.hidden_dim % self.heads:
            raise ScorerError(
                f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}"
            )
        if self.max_len < 2:
            raise ScorerError("max_len must be at least 2")


_LAYER_PARAMS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)


def param_shapes(cfg: ScorerConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Checkpoint order and shape of every parameter tensor."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_len, d))]
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
        "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    for i in range(cfg.layers):
        shapes += [(f"layer{i}.{name}", per_layer[name]) for name in _LAYER_PARAMS]
    shapes += [
        ("lnf_g", (d,)), ("lnf_b", (d,)),
        ("mlm_bias", (cfg.vocab_size,)),
        ("head_w", (d, 1)), ("head_b", (1,)),
    ]
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ScorerModel:
    """Parameters plus the forward computations of the scorer."""

    def __init__(self, cfg: ScorerConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params(cfg)
        self.params = params

    @staticmethod
    def _init_params(cfg: ScorerConfig) -> dict[str, Tensor]:
        rng = np.random.default_rng(cfg.seed)
        params = {}
        for name, shape in param_shapes(cfg):
            short = name.rsplit(".", 1)[-1]
            if short.endswith("_g"):
                arr = np.ones(shape)
            elif short.startswith("b") or short.endswith("_b") or short == "mlm_bias":
                arr = np.zeros(shape)
            else:
                arr = _truncated_normal(rng, shape)
            params[name] = Tensor(arr, requires_grad=True)
        return params

    # -- bookkeeping -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self, include_embeddings: bool = True) -> int:
        skip = () if include_embeddings else ("tok_emb", "pos_emb")
        return sum(t.data.size for n, t in self.params.items() if n not in skip)

    def copy(self, dtype=None) -> "ScorerModel":
        return ScorerModel(
            self.cfg,
            {n: Tensor(t.data.copy(), requires_grad=True, dtype=dtype or t.data.dtype)
             for n, t in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    # -- forward -----------------------------------------------------------
    def _check_ids(self, seqs: Sequence[Sequence[int]]) -> None:
        for ids in seqs:
            if len(ids) > self.cfg.max_len:
                raise ScorerError(
                    f"sequence of length {len(ids)} exceeds max_len {self.cfg.max_len}"
                )
            if not len(ids) or ids[0] != CLS_ID:
                raise ScorerError("sequences must start with [CLS]")
            if min(ids) < 0 or max(ids) >= self.cfg.vocab_size:
                raise ScorerError(f"token id outside vocabulary of size {self.cfg.vocab_size}")

    @staticmethod
    def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Right-pad to a (batch, length) id matrix and its validity mask."""
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        return ids, mask

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Final-layer hidden states, shape (batch, length, hidden)."""
        cfg, p = self.cfg, self.params
        B, L = ids.shape
        H, d = cfg.heads, cfg.hidden_dim
        dh = d // H
        pos = np.broadcast_to(np.arange(L), (B, L))
        x = p["tok_emb"][ids] + p["pos_emb"][pos]
        key_mask = mask[:, None, None, :]
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.layers):
            w = lambda n: p[f"layer{i}.{n}"]  # noqa: E731
            h = T.layer_norm(x, w("ln1_g"), w("ln1_b"))
            q = (h @ w("wq") + w("bq")).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (h @ w("wk") + w("bk")).reshape(B, L, H, dh).transpose(0, 2, 3, 1)
            v = (h @ w("wv") + w("bv")).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            att = T.softmax_rows((q @ k) * scale, mask=key_mask)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            x = x + (ctx @ w("wo") + w("bo"))
            h = T.layer_norm(x, w("ln2_g"), w("ln2_b"))
            x = x + (T.gelu(h @ w("w1") + w("b1")) @ w("w2") + w("b2"))
        return T.layer_norm(x, p["lnf_g"], p["lnf_b"])

    def score_batch(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        """Second-pass cost for each sequence, shape (batch,)."""
        self._check_ids(seqs)
        ids, mask = self.pad(seqs)
        return self.score_padded(ids, mask)

    def score_padded(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        hidden = self.encode(ids, mask)
        cls = hidden[:, 0, :]
        out = cls @ self.params["head_w"] + self.params["head_b"]
        return out.reshape(ids.shape[0])

    def mlm_logits_at(self, ids: np.ndarray, mask: np.ndarray,
                      rows: np.ndarray, cols: np.ndarray) -> Tensor:
        """Vocabulary logits at the given (row, col) positions, shape (k, vocab)."""
        hidden = self.encode(ids, mask)
        picked = hidden[rows, cols]
        return picked @ self.params["tok_emb"].T + self.params["mlm_bias"]


def score(model: ScorerModel, ids: Sequence[int]) -> Tensor:
    """Second-pass cost of one token sequence (scalar tensor)."""
    return model.score_batch([list(ids)])[0]


def mlm_logits(model: ScorerModel, masked_ids: Sequence[int]) -> Tensor:
    """Logits for every position of one sequence, shape (length, vocab)."""
    seq = list(masked_ids)
    model._check_ids([seq])
    ids, mask = ScorerModel.pad([seq])
    n = len(seq)
    return model.mlm_logits_at(ids, mask, np.zeros(n, dtype=np.int64), np.arange(n))


def masked_variants(ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """One copy of ``ids`` per non-[CLS] position with that position masked."""
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids) - 1
    batch = np.tile(ids, (n, 1))
    positions = np.arange(1, n + 1)
    batch[np.arange(n), positions] = MASK_ID
    return batch, positions


def pll_terms(model: ScorerModel, ids: Sequence[int]) -> np.ndarray:
    """-log P(x_t | X with t masked) for every non-[CLS] position."""
    if len(ids) < 2:
        raise ScorerError("PLL needs [CLS] plus at least one token")
    model._check_ids([list(ids)])
    batch, positions = masked_variants(ids)
    mask = np.ones_like(batch, dtype=bool)
    n = len(positions)
    logits = model.mlm_logits_at(batch, mask, np.arange(n), positions)
    logp = T.log_softmax_rows(logits).data
    targets = np.asarray(ids, dtype=np.int64)[positions]
    return -logp[np.arange(n), targets]


def pll(model: ScorerModel, ids: Sequence[int]) -> float:
    """Pseudo negative log-likelihood: sum of masked-position terms."""
    return float(pll_terms(model, ids).sum())


# -- checkpoints -------------------------------------------------------------

_CFG_FIELDS = [f.name for f in fields(ScorerConfig)]
_HEADER = struct.Struct("<4sI")
_CFG = struct.Struct("<" + "q" * len(_CFG_FIELDS))


def save_checkpoint(model: ScorerModel, path) -> None:
    """Write magic, format version, config, then float32 LE tensors in order."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        fh.write(_CFG.pack(*(getattr(model.cfg, f) for f in _CFG_FIELDS)))
        for name, shape in param_shapes(model.cfg):
            arr = model.params[name].data
            if arr.shape != shape:
                raise ScorerError(f"{name}: shape {arr.shape} != {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ScorerModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + _CFG.size:
        raise ScorerError(f"{path}: truncated checkpoint header")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ScorerError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ScorerError(f"{path}: unsupported format version {version}")
    cfg = ScorerConfig(**dict(zip(_CFG_FIELDS, _CFG.unpack_from(blob, _HEADER.size))))
    offset = _HEADER.size + _CFG.size
    params = {}
    for name, shape in param_shapes(cfg):
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise ScorerError(f"{path}: checkpoint ends inside tensor {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
        offset = end
    if offset != len(blob):
        raise ScorerError(f"{path}: {len(blob) - offset} trailing bytes")
    return ScorerModel(cfg, params)


def config_dict(cfg: ScorerConfig) -> dict:
    return asdict(cfg)
