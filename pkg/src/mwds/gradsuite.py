"""Finite-difference checks of every training loss on random instances."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from mwds import losses as L
from mwds.nbest import CLS_ID
from mwds.scorer import ScorerConfig, ScorerModel
from mwds.tensor import Tensor, grad_check, precision

# loss name -> builder(rng, n) returning (f, point)
Builder = Callable[[np.random.Generator, int], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _nbest_instance(rng: np.random.Generator, n: int):
    first = rng.normal(0.0, 0.1, n)
    E = rng.integers(0, 6, n).astype(float)
    teacher = L.NBestScores(first, rng.normal(0.0, 1.0, n), E)
    return first, E, teacher


def _nbest_builder(spec: L.LossSpec) -> Builder:
    def build(rng, n):
        first, E, teacher = _nbest_instance(rng, n)

        def f(x):
            return L.combined_loss(spec, L.NBestScores(first, x, E), teacher)

        return f, rng.normal(0.0, 1.0, n)

    return build


def _mlm_builder(rng, n):
    cfg = ScorerConfig(layers=1, hidden_dim=4, heads=1, ffn_dim=4, vocab_size=9, max_len=6,
                       seed=int(rng.integers(1 << 31)))
    model = ScorerModel(cfg).copy(np.float64)
    for t in model.parameters():
        t.data = t.data + rng.normal(0.0, 0.5, t.data.shape)
    seqs = [[CLS_ID] + rng.integers(4, 9, int(rng.integers(2, 6))).tolist() for _ in range(n)]
    ids, pad, targets = L.mask_tokens(seqs, cfg.vocab_size, rng, rate=0.3)

    def f(x):
        saved = model.params["tok_emb"]
        model.params["tok_emb"] = x
        try:
            return L.mlm_loss(model, ids, pad, targets)
        finally:
            model.params["tok_emb"] = saved

    return f, model.params["tok_emb"].data.copy()


def _pll_distill_builder(rng, n):
    target = rng.uniform(0.0, 20.0, n)
    return (lambda x: L.pll_distill_loss(x, target)), rng.uniform(0.0, 20.0, n)


def suite(temperature: float = 2.0, alpha: float = 1.0, beta: float = 0.01,
          gamma: float = 0.5) -> dict[str, Builder]:
    named = {"mwer": "mwer", "post_ce": "post_ce", "post_oracle": "post_oracle",
             "nmse": "nmse", "mse": "mse", **{c: c for c in L.COMBOS}}
    out: dict[str, Builder] = {
        name: _nbest_builder(L.LossSpec.from_name(spec, temperature, alpha, beta, gamma))
        for name, spec in named.items()
    }
    out["mlm"] = _mlm_builder
    out["pll_distill"] = _pll_distill_builder
    return out


def run(instances: int = 20, n: int = 8, epsilon: float = 1e-5, seed: int = 0,
        names=None) -> dict[str, float]:
    """Largest relative gradient error per loss over ``instances`` random draws."""
    builders = suite()
    if names is not None:
        unknown = set(names) - set(builders)
        if unknown:
            raise ValueError(f"unknown losses {sorted(unknown)}")
        builders = {k: builders[k] for k in names}
    worst = {}
    with precision(64):
        for name, build in builders.items():
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            err = 0.0
            for _ in range(instances):
                f, point = build(rng, n)
                err = max(err, grad_check(f, point, epsilon))
            worst[name] = err
    return worst
