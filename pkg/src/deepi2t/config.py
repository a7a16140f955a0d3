"""Run configuration: one INI file per run, typed sections, unknown keys rejected."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import get_type_hints

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Validation failure; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunSection:
    out_dir: str = "run"
    seed: int = 0
    tz: str = "UTC"


@dataclass
class DataSection:
    format: str = "synthetic"  # synthetic | porto | generic | canonical
    path: str = ""
    cutoff: str = ""  # ISO date; first test day
    min_time: int = 60
    max_time: int = 7200
    min_points: int = 2


@dataclass
class GridSection:
    min_lon: float = -8.68
    min_lat: float = 41.10
    max_lon: float = 0.0
    max_lat: float = 0.0
    cell_size: float = 200.0
    width: int = 0
    height: int = 0


@dataclass
class SynthSection:
    seed: int = 0
    width: int = 30
    height: int = 30
    cell_size: float = 200.0
    trips: int = 5000
    days: int = 14
    train_days: int = 11


@dataclass
class TilesSection:
    source: str = "render"  # render | xyz
    url: str = ""
    zoom: int = 0  # 0 = choose from cell size
    cache_dir: str = ""
    rate_limit: float = 1.0
    user_agent: str = ""
    concurrency: int = 4


@dataclass
class EmbeddingSection:
    dim: int = 100
    order: int = 2
    epochs: int = 10
    negatives: int = 5
    lr: float = 0.025
    samples_per_epoch: int = 0  # 0 = one pass over the edges
    max_hops: int = 5


@dataclass
class FeaturesSection:
    flow_unit: float = 100.0


@dataclass
class ModelSection:
    profile: str = "full"  # full | toy
    lstm_hidden: int = 0  # 0 = profile default
    residual_blocks: int = 2
    time_scale: float = 600.0


@dataclass
class TrainingSection:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    clip: float = 5.0
    patience: int = 5
    eval_fraction: float = 0.1
    seed: int = 0
    threads: int = 1


@dataclass
class EvaluateSection:
    checkpoint: str = ""
    neighbor_cap: int = 50
    plots: bool = True


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "grid": GridSection,
    "synth": SynthSection,
    "tiles": TilesSection,
    "embedding": EmbeddingSection,
    "features": FeaturesSection,
    "model": ModelSection,
    "training": TrainingSection,
    "evaluate": EvaluateSection,
}

# Sections that do not change any artifact's content stay out of the hash.
UNHASHED = {"evaluate": None, "run": {"out_dir"}, "tiles": {"cache_dir", "rate_limit", "concurrency", "user_agent"}}

_CHOICES = {
    "data.format": {"synthetic", "porto", "generic", "canonical"},
    "tiles.source": {"render", "xyz"},
    "model.profile": {"full", "toy"},
    "embedding.order": {1, 2},
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    grid: GridSection = field(default_factory=GridSection)
    synth: SynthSection = field(default_factory=SynthSection)
    tiles: TilesSection = field(default_factory=TilesSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    version: int = CONFIG_VERSION

    # -- io ---------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("<file>", str(exc).splitlines()[0]) from None
        cfg = cls()
        for name in parser.sections():
            if name == "config":
                for key, raw in parser[name].items():
                    if key != "version":
                        raise ConfigError(f"config.{key}", "unknown key")
                    if int(raw) != CONFIG_VERSION:
                        raise ConfigError("config.version", f"unsupported version {raw}")
                continue
            if name not in SECTIONS:
                raise ConfigError(name, "unknown section")
            section = getattr(cfg, name)
            hints = get_type_hints(type(section))
            for key, raw in parser[name].items():
                if key not in hints:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                setattr(section, key, _coerce(f"{name}.{key}", raw, hints[key]))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError("<file>", f"config file {p} not found")
        return cls.from_text(p.read_text())

    def to_text(self) -> str:
        lines = ["[config]", f"version = {self.version}", ""]
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS} | {"version": self.version}

    # -- semantics --------------------------------------------------------

    def config_hash(self) -> str:
        """16 hex digits over every artifact-relevant setting."""
        payload = {"version": self.version}
        for name in SECTIONS:
            skip = UNHASHED.get(name, set())
            if name in UNHASHED and skip is None:
                continue
            payload[name] = {k: v for k, v in asdict(getattr(self, name)).items() if k not in skip}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        for dotted, allowed in _CHOICES.items():
            sec, key = dotted.split(".")
            v = getattr(getattr(self, sec), key)
            if v not in allowed:
                raise ConfigError(dotted, f"must be one of {sorted(allowed)}, got {v!r}")
        if self.data.format != "synthetic":
            if not self.data.path:
                raise ConfigError("data.path", "required for non-synthetic data")
            if not self.data.cutoff:
                raise ConfigError("data.cutoff", "required for non-synthetic data")
        if self.data.cutoff:
            try:
                date.fromisoformat(self.data.cutoff)
            except ValueError:
                raise ConfigError("data.cutoff", f"not an ISO date: {self.data.cutoff!r}") from None
        if self.tiles.source == "xyz":
            if not self.tiles.url:
                raise ConfigError("tiles.url", "required for tile source xyz")
            if not self.tiles.user_agent:
                raise ConfigError("tiles.user_agent", "tile servers require an identifying user agent")
        if not 0.0 <= self.training.eval_fraction < 1.0:
            raise ConfigError("training.eval_fraction", "must lie in [0, 1)")
        if self.features.flow_unit <= 0:
            raise ConfigError("features.flow_unit", "must be positive")
        s = self.synth
        if not (1 <= s.train_days < s.days):
            raise ConfigError("synth.train_days", "must lie in [1, synth.days)")

    def require(self, dotted: str):
        sec, key = dotted.split(".")
        v = getattr(getattr(self, sec), key)
        if v in ("", None):
            raise ConfigError(dotted, "required but not set")
        return v


def _coerce(key: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def synthetic_toy_config(out_dir: str = "run", seed: int = 0, **overrides) -> RunConfig:
    """Desk-scale synthetic run: 30x30 city, toy model profile, flow buckets sized to the corpus."""
    cfg = RunConfig()
    cfg.run.out_dir = out_dir
    cfg.run.seed = seed
    cfg.synth.seed = seed
    cfg.model.profile = "toy"
    cfg.features.flow_unit = 0.05
    cfg.embedding.epochs = 5
    for dotted, v in overrides.items():
        sec, key = dotted.split("__")
        setattr(getattr(cfg, sec), key, v)
    cfg.validate()
    return cfg
