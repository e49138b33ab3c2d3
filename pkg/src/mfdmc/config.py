"""INI-style run configuration with strict key checking and dotted overrides."""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainConfig

DATA_DIR_ENV = "MFDMC_DATA_DIR"
DATASET_FORMATS = ("movielens-100k", "movielens-1m", "delimited")
METADATA_FORMATS = ("genres", "u.item", "movies.dat")


class RunConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    format: str = "movielens-100k"
    path: str = "ml-100k/u.data"
    delimiter: str = "\t"
    range_min: float = 1.0
    range_max: float = 5.0
    has_header: bool = False
    split_seed: int = 1
    metadata: str = ""
    metadata_format: str = "genres"

    def __post_init__(self):
        if self.format not in DATASET_FORMATS:
            raise RunConfigError(f"dataset.format must be one of {DATASET_FORMATS}")
        if self.metadata_format not in METADATA_FORMATS:
            raise RunConfigError(f"dataset.metadata_format must be one of {METADATA_FORMATS}")


@dataclass
class ModelSection:
    d: int = 16
    v: int = 8
    t: int = 10
    share_centers: bool = True
    use_biases: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, v=self.v, t_init=self.t, share_centers=self.share_centers,
                           use_biases=self.use_biases)


@dataclass
class BaselineSection:
    lam: float = 0.02
    learning_rate: float = 0.005
    epochs: int = 300
    batch_size: int = 1024
    optimizer: str = "adam"
    early_stop_patience: int | None = 10


@dataclass
class EvalSection:
    clamp: bool = True
    output_dir: str = "runs/default"


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def baseline_train_config(self) -> TrainConfig:
        b = self.baseline
        return replace(self.train, lam=b.lam, learning_rate=b.learning_rate, epochs=b.epochs,
                       batch_size=b.batch_size, optimizer=b.optimizer,
                       early_stop_patience=b.early_stop_patience)

    def dataset_path(self, data_dir: str | None = None) -> Path:
        return resolve_data_path(self.dataset.path, data_dir)

    def metadata_path(self, data_dir: str | None = None) -> Path | None:
        if not self.dataset.metadata:
            return None
        return resolve_data_path(self.dataset.metadata, data_dir)


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainConfig,
    "baseline": BaselineSection,
    "eval": EvalSection,
}
# INI spellings that differ from the Python field names
KEY_ALIASES = {"lambda": "lam"}


def resolve_data_path(path: str, data_dir: str | None = None) -> Path:
    p = Path(path).expanduser()
    if p.is_absolute():
        return p
    base = data_dir or os.environ.get(DATA_DIR_ENV)
    return Path(base) / p if base else p


def _coerce(raw: str, annotation, where: str):
    text = raw.strip()
    ann = str(annotation)
    optional = "None" in ann
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if ann.startswith("bool") or annotation is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ann.startswith("int") or annotation is int:
            return int(text)
        if ann.startswith("float") or annotation is float:
            return float(text)
    except ValueError:
        raise RunConfigError(f"{where}: cannot parse {raw!r} as {ann}") from None
    return _unescape(text)


def _unescape(text: str) -> str:
    if text == "\\t" or text.lower() == "tab":
        return "\t"
    return text


def _build_section(name: str, values: dict[str, str]):
    cls = SECTIONS[name]
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        attr = KEY_ALIASES.get(key, key)
        if attr not in types:
            raise RunConfigError(f"unknown key {name}.{key}")
        kwargs[attr] = _coerce(raw, types[attr], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"[{name}] {exc}") from None


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise RunConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key.strip()] = value
    return out


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Parse an INI file (or defaults when ``path`` is None) and apply overrides."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise RunConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise RunConfigError(f"{path}: {exc}") from None
    values = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise RunConfigError(f"unknown section [{section}]")
        values[section].update(parser[section])
    for section, kv in parse_overrides(overrides).items():
        if section not in SECTIONS:
            raise RunConfigError(f"unknown section {section!r} in override")
        values[section].update(kv)
    return RunConfig(**{name: _build_section(name, values[name]) for name in SECTIONS})
