"""JSON experiment configuration: parsing, validation and the normalized echo."""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .graph import Dataset, generate_synthetic, load_dataset
from .layers import ModelConfig
from .training import TrainConfig

SEED_ENV = "TSEN_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    threshold: float = 0.3
    class_count: int = 2
    name: Optional[str] = None
    n_graphs: int = 400
    n_nodes: int = 50
    signal: float = 0.8
    timepoints: int = 64

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ValueError(f"source must be 'synthetic' or 'manifest', got {self.source!r}")
        if self.source == "manifest" and not self.path:
            raise ValueError("path is required when source is 'manifest'")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"threshold must lie in [0, 1), got {self.threshold}")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.n_graphs < 10:
            raise ValueError("n_graphs must be at least 10")
        if self.n_nodes < 4:
            raise ValueError("n_nodes must be at least 4")
        if not 0.0 <= self.signal < 1.0:
            raise ValueError(f"signal must lie in [0, 1), got {self.signal}")
        if self.timepoints < 2:
            raise ValueError("timepoints must be at least 2")


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    def to_dict(self) -> dict:
        d = {"dataset": asdict(self.dataset), "model": asdict(self.model), "train": asdict(self.train),
             "output": asdict(self.output), "seed": self.seed}
        # the base seed lives at top level only
        d["train"].pop("seed")
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir=None) -> Path:
        """Write the effective configuration next to the run outputs."""
        out = Path(out_dir) if out_dir is not None else self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        path.write_text(self.to_json())
        return path

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return ExperimentConfig(self.dataset, self.model.replace(variant=variant), self.train,
                                self.output, self.seed)

    def train_config(self) -> TrainConfig:
        return self.train.replace(seed=self.seed)

    def load_dataset(self, base_dir=None) -> Dataset:
        """Build the configured dataset; relative manifest paths resolve against ``base_dir``."""
        d = self.dataset
        if d.source == "manifest":
            path = Path(d.path)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return load_dataset(path, d.threshold, d.class_count, d.name)
        return generate_synthetic(d.n_graphs, d.n_nodes, d.signal, seed=self.seed, threshold=d.threshold,
                                  timepoints=d.timepoints)


def _check_type(path: str, value: Any, default: Any) -> None:
    ok = True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in value)
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {json.dumps(value)}")


_OPTIONAL_INT = {"model.ffn_dim"}
_OPTIONAL_STR = {"dataset.path", "dataset.name"}


def _section(cls, name: str, raw: Any, skip: tuple[str, ...] = ()):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name}: expected an object")
    template = cls()
    defaults = {f.name: getattr(template, f.name) for f in fields(cls)}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in defaults or key in skip:
            hint = " (use the top-level 'seed')" if key == "seed" else ""
            raise ConfigError(f"{path}: unknown key{hint}")
        if value is None and path in _OPTIONAL_INT | _OPTIONAL_STR:
            continue
        if path in _OPTIONAL_INT:
            _check_type(path, value, 0)
        elif path in _OPTIONAL_STR:
            _check_type(path, value, "")
        else:
            _check_type(path, value, defaults[key])
    try:
        return cls(**raw)
    except ValueError as exc:
        msg = str(exc)
        names = [f.name for f in fields(cls)]
        # the field mentioned first in the message is the one at fault
        found = [(m.start(), n) for n in names for m in [re.search(rf"\b{n}\b", msg)] if m]
        hit = min(found)[1] if found else None
        raise ConfigError(f"{name}.{hit}: {msg}" if hit else f"{name}: {msg}") from None


def config_from_dict(raw: Mapping, env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Validate a decoded config; ``env`` may override the base seed via ``TSEN_SEED``."""
    if not isinstance(raw, Mapping):
        raise ConfigError("<root>: expected a JSON object")
    unknown = set(raw) - {"dataset", "model", "train", "output", "seed"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    if "dataset" not in raw:
        raise ConfigError("dataset: missing section")
    dataset = _section(DatasetConfig, "dataset", raw["dataset"])
    model = _section(ModelConfig, "model", raw.get("model"))
    train = _section(TrainConfig, "train", raw.get("train"), skip=("seed",))
    output = _section(OutputConfig, "output", raw.get("output"))
    seed = raw.get("seed", 0)
    _check_type("seed", seed, 0)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {env[SEED_ENV]!r}") from None
    if seed < 0:
        raise ConfigError(f"seed: must be nonnegative, got {seed}")
    return ExperimentConfig(dataset, model, train.replace(seed=seed), output, seed)


def parse_config(path, env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw, env)
