"""Command-line entry point: one verb per pipeline stage.

Every verb reads a flat JSON config (``--config``) plus ``--set KEY=VALUE``
overrides, writes its artifacts and a resolved ``config.json`` snapshot into
``--out``, and exits 0 on success, 1 on invalid input, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Sequence

import numpy as np

from mwds import gradsuite
from mwds.losses import LossError
from mwds.metrics import MetricError
from mwds.nbest import CorpusError, Vocab, load_corpus, save_corpus
from mwds.pipeline.config import (
    MODEL_KEYS,
    ConfigError,
    PathConfig,
    Stage,
    SynthConfig,
    TrainConfig,
    build,
    keys_of,
    load_config,
    scorer_config,
)
from mwds.pipeline.rescoring import (
    evaluate,
    first_pass_selections,
    format_reports,
    oracle_selections,
    rescore,
    tune_interpolation,
)
from mwds.pipeline.synth import generate_synthetic
from mwds.pipeline.train import (
    TrainingError,
    corpus_pll,
    distill,
    init_model,
    score_corpus,
    train,
)
from mwds.scorer import MAGIC, ScorerError, load_checkpoint, save_checkpoint

log = logging.getLogger("mwds")

GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class ModelKeys:
    layers: int = 2
    hidden_dim: int = 32
    heads: int = 2
    ffn_dim: int = 64
    max_len: int = 32


@dataclass(frozen=True)
class VocabKeys:
    vocab_max_size: int | None = None


@dataclass(frozen=True)
class WeightKeys:
    w1: float = 1.0
    w2: float = 1.0
    weights: str | None = None


@dataclass(frozen=True)
class GradKeys:
    instances: int = 20
    n: int = 8
    epsilon: float = 1e-5
    seed: int = 0


_TRAIN_PATHS = ("data_dir", "train", "dev", "vocab")
_STAGE_VERBS = {
    "adapt": (Stage.ADAPT, "mlm", ()),
    "distill-pll": (Stage.PLL_DISTILL, "mwer", ("teacher_checkpoint",)),
    "train-mwer": (Stage.MWER, "mwer", ()),
    "distill": (Stage.DISTILL, "post_ce", ("teacher_checkpoint",)),
}


def _train_keys(extra: Sequence[str]) -> list[str]:
    skip = {"stage"}
    return [k for k in keys_of(TrainConfig) if k not in skip] + list(MODEL_KEYS) + list(
        _TRAIN_PATHS) + list(extra)


VERB_KEYS: dict[str, list[str]] = {
    "gen-data": keys_of(SynthConfig, VocabKeys),
    **{verb: _train_keys(extra) for verb, (_, _, extra) in _STAGE_VERBS.items()},
    "rescore": ["checkpoint", "corpus", "vocab", "data_dir"] + keys_of(WeightKeys),
    "tune-weights": ["checkpoint", "corpus", "vocab", "data_dir"],
    "evaluate": ["corpus", "vocab", "data_dir", "first_pass", "teacher", "baseline", "student",
                 "tune_on"],
    "grad-check": keys_of(GradKeys),
}

VERB_HELP = {
    "gen-data": "write seeded synthetic train/dev/test corpora and a vocabulary",
    "adapt": "masked-LM adaptation on reference transcripts",
    "distill-pll": "fit the CLS head to a teacher's pseudo-log-likelihoods",
    "train-mwer": "minimum-WER training on n-best lists",
    "distill": "distil a teacher's n-best scores into a student",
    "rescore": "pick a hypothesis per utterance with an interpolated score",
    "tune-weights": "grid-search the second-pass weight on a dev corpus",
    "evaluate": "WER report for several systems on one corpus",
    "grad-check": "finite-difference check of every training loss",
}


def _defaults(verb: str) -> dict[str, Any]:
    # max_len and seed are shared names; the verb decides which default wins
    first = (SynthConfig, VocabKeys) if verb == "gen-data" else (ModelKeys, TrainConfig)
    out: dict[str, Any] = {}
    for cls in first + (SynthConfig, VocabKeys, TrainConfig, ModelKeys, PathConfig, WeightKeys,
                        GradKeys):
        for f in fields(cls):
            value = f.default
            out.setdefault(f.name, value.value if hasattr(value, "value") else value)
    return out


def _key_listing(verb: str) -> str:
    defaults = _defaults(verb)
    lines = ["config keys (flat JSON object or --set KEY=VALUE):"]
    for key in VERB_KEYS[verb]:
        lines.append(f"  {key:<20} default: {json.dumps(defaults.get(key))}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwds", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    for verb, text in VERB_HELP.items():
        p = sub.add_parser(verb, help=text, description=text, epilog=_key_listing(verb),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="PATH", help="flat JSON config file")
        p.add_argument("--out", metavar="DIR", default=".", help="output directory")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       dest="overrides", help="override one config key (repeatable)")
        p.add_argument("--workers", type=int, default=1, metavar="N",
                       help="concurrent scoring workers")
        p.add_argument("--seed", type=int, default=None, metavar="S",
                       help="shorthand for --set seed=S")
    return parser


# -- helpers -----------------------------------------------------------------

def _path(values: dict, key: str, required: bool = True) -> str | None:
    value = values.get(key)
    if value is None and values.get("data_dir") and key in ("train", "dev", "test", "vocab",
                                                            "corpus"):
        name = "vocab.json" if key == "vocab" else f"{'test' if key == 'corpus' else key}.jsonl"
        value = os.path.join(values["data_dir"], name)
    if value is None and required:
        raise ConfigError(f"missing required key {key!r}")
    return value


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _snapshot(out: str, verb: str, values: dict) -> None:
    defaults = _defaults(verb)
    resolved = {k: values.get(k, defaults.get(k)) for k in VERB_KEYS[verb]}
    _write_json(os.path.join(out, "config.json"), {"verb": verb, **resolved})


def _is_checkpoint(path: str) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(len(MAGIC)) == MAGIC
    except OSError:
        return False


# -- verbs -------------------------------------------------------------------

def cmd_gen_data(values: dict, out: str, workers: int) -> None:
    cfg = build(SynthConfig, values)
    extra = build(VocabKeys, values)
    paths = generate_synthetic(cfg, out, extra.vocab_max_size)
    for split, path in paths.items():
        print(f"{split}: {path}")


def _train_stage(verb: str, values: dict, out: str, workers: int) -> None:
    stage, default_loss, _ = _STAGE_VERBS[verb]
    values = {"loss": default_loss, **values, "stage": stage.value}
    cfg = build(TrainConfig, values)
    vocab = Vocab.load(_path(values, "vocab"))
    corpus = load_corpus(_path(values, "train"))
    dev = load_corpus(_path(values, "dev"))
    base = scorer_config(values, len(vocab), cfg.seed)
    model = init_model(cfg, base)
    kwargs = {}
    teacher = None
    teacher_path = values.get("teacher_checkpoint")
    if teacher_path:
        teacher = load_checkpoint(teacher_path)
        if teacher.cfg.vocab_size != len(vocab):
            raise ConfigError("teacher vocabulary size does not match the vocabulary")
    if stage is Stage.PLL_DISTILL:
        if teacher is None:
            raise ConfigError("distill-pll needs teacher_checkpoint")
        kwargs["teacher_pll"] = corpus_pll(teacher, corpus, vocab)
        kwargs["dev_teacher_pll"] = corpus_pll(teacher, dev, vocab)
    if stage is Stage.DISTILL:
        result, corpus_t, dev_t = distill(teacher, model, corpus, dev, vocab, cfg, workers)
        save_corpus(corpus_t, os.path.join(out, "train.scored.jsonl"))
        save_corpus(dev_t, os.path.join(out, "dev.scored.jsonl"))
    else:
        result = train(cfg, model, corpus, dev, vocab, **kwargs)
    save_checkpoint(result.model, os.path.join(out, "model.ckpt"))
    result.write_log(os.path.join(out, "train_log.jsonl"))
    best = result.log[result.best_epoch]
    print(f"best epoch {result.best_epoch}: dev loss {best.dev_loss:.6f}"
          + ("" if best.dev_wer is None else f", dev WER {best.dev_wer:.2f}"))


def _weights(values: dict) -> tuple[float, float]:
    keys = build(WeightKeys, values)
    if keys.weights:
        try:
            with open(keys.weights, encoding="utf-8") as fh:
                obj = json.load(fh)
            return float(obj["w1"]), float(obj["w2"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"cannot read weights from {keys.weights}: {exc}") from None
    return keys.w1, keys.w2


def cmd_rescore(values: dict, out: str, workers: int) -> None:
    model = load_checkpoint(_path(values, "checkpoint"))
    corpus = load_corpus(_path(values, "corpus"))
    vocab = Vocab.load(_path(values, "vocab"))
    w1, w2 = _weights(values)
    res = rescore(model, corpus, w1, w2, vocab=vocab, workers=workers)
    with open(os.path.join(out, "selections.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(res.to_json(corpus) + "\n")
    save_corpus(corpus.with_teacher_scores(res.scores), os.path.join(out, "scored.jsonl"))
    print(f"rescored {len(corpus)} utterances with w1={w1:g}, w2={w2:g}")


def cmd_tune_weights(values: dict, out: str, workers: int) -> None:
    model = load_checkpoint(_path(values, "checkpoint"))
    dev = load_corpus(_path(values, "corpus"))
    vocab = Vocab.load(_path(values, "vocab"))
    scores = score_corpus(model, dev, vocab, workers)
    w1, w2 = tune_interpolation(dev, scores)
    wer = evaluate({"tuned": rescore(None, dev, w1, w2, scores=scores).selections},
                   dev)["tuned"].wer
    _write_json(os.path.join(out, "weights.json"), {"w1": w1, "w2": w2, "dev_wer": wer})
    print(f"w1={w1:g} w2={w2:g} dev WER {wer:.2f}")


def _system(spec: str, corpus, vocab, values: dict, workers: int):
    """Selections plus the utterance ids they were made on."""
    ids = [u.id for u in corpus]
    if spec == "oracle":
        return oracle_selections(corpus), ids
    if spec == "first_pass":
        return first_pass_selections(corpus), ids
    if _is_checkpoint(spec):
        if vocab is None:
            raise ConfigError("scoring a checkpoint needs a vocabulary")
        model = load_checkpoint(spec)
        tune_on = values.get("tune_on")
        if not tune_on:
            raise ConfigError("scoring a checkpoint needs tune_on (a dev corpus)")
        dev = load_corpus(tune_on)
        w1, w2 = tune_interpolation(dev, score_corpus(model, dev, vocab, workers))
        return rescore(model, corpus, w1, w2, vocab=vocab, workers=workers).selections, ids
    try:
        with open(spec, encoding="utf-8") as fh:
            obj = json.load(fh)
        return np.asarray(obj["selections"], dtype=np.int64), obj.get("ids", ids)
    except OSError as exc:
        raise ConfigError(f"cannot read system {spec!r}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError):
        raise ConfigError(f"{spec!r} is neither a checkpoint nor a selections file") from None


def cmd_evaluate(values: dict, out: str, workers: int) -> None:
    corpus = load_corpus(_path(values, "corpus"))
    vocab_path = _path(values, "vocab", required=False)
    vocab = Vocab.load(vocab_path) if vocab_path and os.path.exists(vocab_path) else None
    systems, ids = {}, {}
    for role in ("first_pass", "teacher", "baseline", "student"):
        spec = values.get(role)
        if spec:
            systems[role], ids[role] = _system(str(spec), corpus, vocab, values, workers)
    if not systems:
        raise ConfigError("evaluate needs at least one of first_pass/teacher/baseline/student")
    baseline = "baseline" if "baseline" in systems else None
    students = ["student"] if baseline and "student" in systems else []
    reports = evaluate(systems, corpus, baseline=baseline,
                       teacher="teacher" if "teacher" in systems else None,
                       students=students, corpus_ids=ids)
    print(format_reports(reports))
    _write_json(os.path.join(out, "report.json"), {k: r.to_dict() for k, r in reports.items()})


def cmd_grad_check(values: dict, out: str, workers: int) -> int:
    keys = build(GradKeys, values)
    worst = gradsuite.run(keys.instances, keys.n, keys.epsilon, keys.seed)
    for name, err in worst.items():
        flag = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name:<20} {err:.3e} {flag}")
    _write_json(os.path.join(out, "grad_check.json"), worst)
    return 0 if max(worst.values()) < GRAD_TOLERANCE else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "rescore": cmd_rescore,
    "tune-weights": cmd_tune_weights,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    **{verb: (lambda v, o, w, verb=verb: _train_stage(verb, v, o, w)) for verb in _STAGE_VERBS},
}

VALIDATION_ERRORS = (ConfigError, CorpusError, ScorerError, LossError, MetricError,
                     FileNotFoundError)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in VERB_KEYS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        parser.print_usage(sys.stderr)
        print(f"mwds: choose a verb from {', '.join(VERB_KEYS)}", file=sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    verb = args.verb
    try:
        if args.config is not None and not os.path.isfile(args.config):
            parser.print_usage(sys.stderr)
            raise ConfigError(f"config file {args.config} not found")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        values = load_config(args.config, overrides, allowed=VERB_KEYS[verb])
        os.makedirs(args.out, exist_ok=True)
        _snapshot(args.out, verb, values)
        status = COMMANDS[verb](values, args.out, args.workers)
        return int(status or 0)
    except VALIDATION_ERRORS as exc:
        print(f"mwds {verb}: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"mwds {verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
