"""Run configuration: JSON with a schema version, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .finetune import FinetuneConfig, StageConfig
from .pretrain import PretrainConfig
from .synthworld import Vocab

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    path: str = "corpus/corpus.jsonl"
    n_pairs: int = 2000
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(vocab_size=len(Vocab.default())))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    schema_version: int = SCHEMA_VERSION

    @property
    def mode_mix(self) -> str:
        return self.pretrain.mode_mix

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if obj.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {obj.get('schema_version')}")
        try:
            return _build(cls, obj, "config")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(obj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


_NESTED = {
    (RunConfig, "corpus"): CorpusConfig,
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "pretrain"): PretrainConfig,
    (RunConfig, "finetune"): FinetuneConfig,
}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in obj.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}.{key}")
        elif cls is FinetuneConfig and key == "stages":
            value = [_build(StageConfig, s, f"{where}.stages[{i}]") for i, s in enumerate(value)]
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def tiny_encoder_config() -> EncoderConfig:
    """Gradient-check scale: 2 layers, width 16, 2 heads, split after layer 1."""
    return EncoderConfig(num_layers=2, split_layer=1, hidden_dim=16, num_heads=2, ffn_dim=32,
                         vocab_size=12, max_text_len=4, object_feature_dim=4)
