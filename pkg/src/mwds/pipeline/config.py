"""Run configuration: flat key/value documents in JSON."""

from __future__ import annotations

import enum
import json
from dataclasses import MISSING, dataclass, fields, replace
from typing import Any, Iterable, Mapping

from mwds.losses import LossSpec
from mwds.scorer import ScorerConfig


class ConfigError(ValueError):
    """Unknown key, bad value or inconsistent configuration."""


class Stage(str, enum.Enum):
    ADAPT = "adapt"
    PLL_DISTILL = "pll_distill"
    MWER = "mwer"
    DISTILL = "distill"


class InitFrom(str, enum.Enum):
    SCRATCH = "scratch"
    ADAPTED = "adapted"
    MWER_TRAINED = "mwer_trained"


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    vocab_words: int = 200
    min_len: int = 5
    max_len: int = 14
    nbest_size: int = 10
    corruption_rate: float = 0.12
    score_noise: float = 0.05
    edit_cost: float = 0.05
    length_penalty: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ConfigError("every split needs at least one utterance")
        if not 1 <= self.nbest_size:
            raise ConfigError("nbest_size must be positive")
        if not 0 <= self.corruption_rate < 1:
            raise ConfigError("corruption_rate must lie in [0, 1)")
        if self.score_noise < 0:
            raise ConfigError("score_noise must be non-negative")
        if not 3 <= self.min_len <= self.max_len:
            raise ConfigError("need 3 <= min_len <= max_len")
        if self.vocab_words < 40:
            raise ConfigError("vocab_words must be at least 40")


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.MWER
    init_from: InitFrom = InitFrom.SCRATCH
    init_checkpoint: str | None = None
    loss: str = "mwer"
    temperature: float = 2.0
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.5
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 0.9
    max_epochs: int = 10
    patience: int = 3
    w1: float = 20.0
    w2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "init_from", InitFrom(self.init_from))
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.init_from is not InitFrom.SCRATCH and not self.init_checkpoint:
            raise ConfigError(f"init_from={self.init_from.value} needs init_checkpoint")
        self.loss_spec()

    def loss_spec(self) -> LossSpec:
        return LossSpec.from_name(self.loss, self.temperature, self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class PathConfig:
    data_dir: str | None = None
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    vocab: str | None = None
    teacher_checkpoint: str | None = None
    checkpoint: str | None = None
    corpus: str | None = None
    selections: str | None = None
    first_pass: str | None = None
    teacher: str | None = None
    baseline: str | None = None
    student: str | None = None
    tune_on: str | None = None


MODEL_KEYS = ("layers", "hidden_dim", "heads", "ffn_dim", "max_len")


def keys_of(*classes) -> list[str]:
    out: list[str] = []
    for cls in classes:
        for f in fields(cls):
            if f.name not in out:
                out.append(f.name)
    return out


def _coerce(value: Any, default: Any, annotation: str, key: str) -> Any:
    if value is None:
        return None
    if isinstance(default, enum.Enum):
        return type(default)(str(value).lower())
    want = annotation.split("|")[0].strip()
    try:
        if want == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if want == "float":
            return float(value)
        if want == "str":
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {want}") from None
    return value


def build(cls, values: Mapping[str, Any]):
    """Instantiate ``cls`` from the subset of ``values`` naming its fields."""
    kwargs = {}
    try:
        for f in fields(cls):
            if f.name in values:
                default = f.default if f.default is not MISSING else None
                kwargs[f.name] = _coerce(values[f.name], default, str(f.type), f.name)
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def scorer_config(values: Mapping[str, Any], vocab_size: int, seed: int,
                  base: ScorerConfig | None = None) -> ScorerConfig:
    base = base or ScorerConfig()
    kwargs = {k: int(values[k]) for k in MODEL_KEYS if k in values}
    try:
        return replace(base, vocab_size=vocab_size, seed=seed, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_value(text: str) -> Any:
    """Interpret a ``--set`` value as JSON when possible, else as a string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: Iterable[str] = (),
                allowed: Iterable[str] | None = None) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
        nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"config must be flat; nested values under {nested}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        values[key.strip()] = parse_value(raw)
    if allowed is not None:
        unknown = sorted(set(values) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return values
