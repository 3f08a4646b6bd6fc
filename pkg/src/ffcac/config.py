"""Run configuration documents: every hyperparameter in one digestible JSON file."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import ReconstructionConfig
from .encoder import EncoderConfig
from .errors import InvalidConfig
from .frontend import FrontendConfig
from .protocol import ProtocolConfig
from .training import TrainConfig
from .utils import canonical_json, stable_digest

OUTPUT_ROOT_ENV = "FFCAC_OUTPUT_ROOT"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 50
    lr0: float = 0.001
    optimizer: str = "adam"
    momentum: float = 0.9
    eta: float = 16.0
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr0=self.lr0, optimizer=self.optimizer,
                           momentum=self.momentum, eta=self.eta, seed=self.seed)


@dataclass(frozen=True)
class DataConfig:
    protocol_manifest: str | None = None
    pretrain_manifest: str | None = None
    pretrained_checkpoint: str | None = None
    cache_dir: str | None = None


@dataclass(frozen=True)
class OutputConfig:
    root: str | None = None  # falls back to $FFCAC_OUTPUT_ROOT, then ./runs
    name: str = "run"

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


SECTIONS = {
    "frontend": FrontendConfig,
    "encoder": EncoderConfig,
    "protocol": ProtocolConfig,
    "training": TrainConfig,
    "reconstruction": ReconstructionConfig,
    "pretrain": PretrainConfig,
    "data": DataConfig,
    "output": OutputConfig,
}

# sections that do not change results and stay out of the digest
_UNDIGESTED = ("output",)


def _desk_frontend() -> FrontendConfig:
    return FrontendConfig(clip_len_s=0.5)


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendConfig = field(default_factory=_desk_frontend)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        d = self.to_dict()
        for name in _UNDIGESTED:
            d.pop(name)
        return stable_digest(d)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_values(self, section: str, **values) -> "RunConfig":
        return self.replace(**{section: dataclasses.replace(getattr(self, section), **values)})

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("config document must be an object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config section(s): {sorted(unknown)}")
        base = cls()
        sections = {}
        for name, typ in SECTIONS.items():
            values = doc.get(name, {})
            if not isinstance(values, dict):
                raise InvalidConfig(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(typ)}
            bad = set(values) - known
            if bad:
                raise InvalidConfig(f"unknown key(s) in section {name!r}: {sorted(bad)}")
            try:
                sections[name] = dataclasses.replace(getattr(base, name), **values)
            except (TypeError, ValueError) as exc:
                raise InvalidConfig(f"section {name!r}: {exc}") from None
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidConfig(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        cfg = cls.from_dict(doc)
        return cfg.resolve_paths(Path(path).parent)

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Make relative data paths relative to the config file's directory."""
        vals = {}
        for f in dataclasses.fields(DataConfig):
            v = getattr(self.data, f.name)
            if v is not None and not Path(v).is_absolute():
                v = str((base / v).resolve())
            vals[f.name] = v
        out = self.replace(data=DataConfig(**vals))
        if self.output.root is not None and not Path(self.output.root).is_absolute():
            out = out.with_values("output", root=str((base / self.output.root).resolve()))
        return out

    def to_json(self) -> str:
        return canonical_json(self.to_dict())
