"""Declarative run configuration: one YAML file, every field defaulted, flags on top."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import CorpusConfig, OracleConfig
from .errors import ConfigError
from .pipeline import PipelineConfig
from .protocol import VocabConfig, build_vocab
from .synthspeech import CodecConfig, SyntheticCodec, vocab_config_for
from .toylm.model import ModelConfig
from .toylm.optim import AdamWConfig
from .toylm.sampling import SamplerConfig
from .toylm.train import PhaseSchedule, default_schedule


@dataclass(frozen=True)
class ModelSection:
    """Model shape; the vocabulary size and token classes come from the codec."""

    layers: int = 2
    width: int = 128
    heads: int = 4
    ffn: int = 512
    max_positions: int = 512
    init_std: float = 0.02
    dtype: str = "float32"


@dataclass(frozen=True)
class PackingSection:
    capacity: int = 512
    shard_size: int = 1000


@dataclass(frozen=True)
class EvalSection:
    mode: str = "quality"
    tolerances: tuple = (0.2, 0.4)
    max_samples: int = 400
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    codec: CodecConfig = CodecConfig()
    vocab: dict | None = None  # None sizes every sub-range to the codec exactly
    corpus: CorpusConfig = CorpusConfig()
    oracles: OracleConfig = OracleConfig()
    pipeline: PipelineConfig = PipelineConfig()
    packing: PackingSection = PackingSection()
    model: ModelSection = ModelSection()
    schedule: PhaseSchedule = field(default_factory=lambda: desk_schedule())
    sampler: SamplerConfig = SamplerConfig()
    eval: EvalSection = EvalSection()

    def build_codec(self) -> SyntheticCodec:
        vc = VocabConfig(**{**self.vocab, "languages": tuple(self.codec.alphabets)}) if self.vocab else vocab_config_for(self.codec)
        return SyntheticCodec(self.codec, build_vocab(vc))

    def model_config(self, codec: SyntheticCodec) -> ModelConfig:
        m = self.model
        if m.max_positions < self.packing.capacity:
            raise ConfigError("model.max_positions must be at least packing.capacity")
        return ModelConfig(codec.layout.total_size, codec.token_classes(), **dataclasses.asdict(m))

    def to_dict(self) -> dict:
        return to_plain(self)


# The toy corpus is a few thousand pairs, so the S2ST phases need more passes
# than one epoch to learn where the source transcript ends and translation begins.
DESK_S2ST_EPOCHS = 3.0


def desk_schedule() -> PhaseSchedule:
    base = default_schedule()
    phases = tuple(
        dataclasses.replace(p, epochs=DESK_S2ST_EPOCHS) if p.data in ("phase2", "phase3") else p for p in base.phases
    )
    return dataclasses.replace(base, phases=phases)


# (de)serialization ------------------------------------------------------------


def to_plain(obj):
    if isinstance(obj, CodecConfig):
        doc = obj.to_dict()
        doc.pop("format"), doc.pop("version")
        return doc
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


_SPECIAL = {
    PhaseSchedule: PhaseSchedule.from_dict,
    CodecConfig: CodecConfig.from_dict,
    AdamWConfig: lambda d: AdamWConfig(**{**d, "betas": tuple(d["betas"])}),
}


def from_plain(cls, doc: dict, where: str = ""):
    if cls in _SPECIAL:
        try:
            return _SPECIAL[cls](doc)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid {where or cls.__name__}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or cls.__name__} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {where or cls.__name__}")
    defaults = cls()
    kwargs = {}
    for name, value in doc.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current) and value is not None:
            value = from_plain(type(current), value, path)
        elif isinstance(current, tuple):
            value = _tuplify(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or cls.__name__}: {exc}") from None


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a plain config mapping."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    doc = copy.deepcopy(doc)
    node = doc
    parts = key.strip().split(".")
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index {part!r} in override {key!r}") from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if part not in node:
                raise ConfigError(f"unknown config key {key!r}")
            if last:
                node[part] = value
            else:
                node = node[part]
        else:
            raise ConfigError(f"cannot descend into {key!r}")
    return doc


def load_config(path=None, overrides=()) -> RunConfig:
    doc = RunConfig().to_dict()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping")
        doc = _merge(doc, loaded)
    for o in overrides:
        doc = apply_override(doc, o)
    return from_plain(RunConfig, doc)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True)
