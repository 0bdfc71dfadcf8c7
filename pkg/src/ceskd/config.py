"""
Strict INI-style experiment configs.

Sections are ``[experiment]``, ``[data]``, ``[train]``, ``[curriculum]``,
``[path]`` and one ``[model NAME]`` per architecture. Keys are
``name = value``; ``#`` starts a comment. Unknown sections or keys, duplicate
keys and badly typed values are errors carrying the line number.
"""
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List

from .engine import RunConfig, make_spec
from .exceptions import ConfigError
from .losses import KDHyperparams
from .nn import LRSchedule


def _list(kind):
    return field(default_factory=list, metadata={"list": kind})


@dataclass
class ExperimentSection:
    name: str = "experiment"
    seeds: List[int] = field(default_factory=lambda: [0], metadata={"list": int})
    out: str = "runs"
    workers: int = 1


@dataclass
class DataSection:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 16
    n_train: int = 1000
    n_test: int = 2000
    hardness_spread: float = 0.5
    modes: int = 2
    separation: float = 3.0
    data_seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: List[str] = _list(str)
    test_files: List[str] = _list(str)
    normalize: bool = True
    augment: bool = False
    crop_pad: int = 4


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    milestones: List[int] = field(default_factory=lambda: [12, 36, 48], metadata={"list": int})
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = True
    alpha: float = 0.9
    temperature: float = 10.0
    dtype: str = "float32"


@dataclass
class CurriculumSection:
    policy: str = "baseline"
    class_balanced: bool = True
    reference: str = ""
    reference_epochs: int = 5
    reference_seed: int = 12345
    scorer_checkpoint: str = ""
    file: str = ""


@dataclass
class PathSection:
    models: List[str] = field(default_factory=list, metadata={"list": str, "required": True})
    method: str = "ceskd"
    teacher_checkpoint: str = ""


@dataclass
class ModelSection:
    depth_tag: int = field(default=0, metadata={"required": True})
    layers: List[str] = field(default_factory=list, metadata={"list": str, "required": True, "sep": " "})


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "train": TrainSection,
    "curriculum": CurriculumSection,
    "path": PathSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    curriculum: CurriculumSection = field(default_factory=CurriculumSection)
    path: PathSection = field(default_factory=PathSection)
    models: Dict[str, ModelSection] = field(default_factory=dict)

    def run_config(self, seed=None) -> RunConfig:
        t = self.train
        return RunConfig(
            epochs=t.epochs, batch_size=t.batch_size,
            hp=KDHyperparams(temperature=t.temperature, alpha=t.alpha),
            schedule=LRSchedule(t.lr, tuple(t.milestones), t.lr_factor),
            momentum=t.momentum, weight_decay=t.weight_decay, nesterov=t.nesterov,
            seed=self.experiment.seeds[0] if seed is None else seed,
            augment=self.data.augment, crop_pad=self.data.crop_pad,
            class_balanced=self.curriculum.class_balanced, policy=self.curriculum.policy,
            dtype=t.dtype)

    def model_spec(self, name, input_shape, n_classes):
        m = self.models[name]
        return make_spec(name, m.layers, m.depth_tag, input_shape, n_classes)

    def path_specs(self, input_shape, n_classes):
        return [self.model_spec(n, input_shape, n_classes) for n in self.path.models]

    def reference_name(self):
        return self.curriculum.reference or self.path.models[0]


_CHOICES = {
    ("data", "kind"): ("synthetic", "idx", "cifar10"),
    ("train", "dtype"): ("float32", "float64"),
    ("curriculum", "policy"): ("baseline", "anti", "random"),
    ("path", "method"): ("noKD", "blkd", "takd", "dgkd", "ceskd"),
}


def _convert(raw, f, where, lineno):
    meta = f.metadata
    if "list" in meta:
        sep = meta.get("sep", ",")
        items = [s.strip() for s in raw.split(sep if sep != " " else None)] if raw.strip() else []
        items = [s for s in items if s]
        return [_scalar(s, meta["list"], where, lineno) for s in items]
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    return _scalar(raw, kind, where, lineno)


def _scalar(raw, kind, where, lineno):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {raw!r}", lineno) from None


def parse_config_text(text) -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = {}
    section = None
    target = None
    header_line = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigError(f"malformed section header {stripped!r}", lineno)
            name = stripped[1:-1].strip()
            if name.startswith("model "):
                model_name = name[6:].strip()
                if not model_name or model_name in cfg.models:
                    raise ConfigError(f"missing or duplicate model name in [{name}]", lineno)
                target = cfg.models[model_name] = ModelSection()
            elif name in SECTIONS:
                if name in header_line:
                    raise ConfigError(f"duplicate section [{name}]", lineno)
                target = getattr(cfg, name)
            else:
                raise ConfigError(f"unknown section [{name}]", lineno)
            section = name
            header_line[name] = lineno
            seen[section] = set()
            continue
        if section is None:
            raise ConfigError("key outside of any section", lineno)
        key, eq, value = stripped.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        by_name = {f.name: f for f in fields(target)}
        if key not in by_name:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if key in seen[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        seen[section].add(key)
        where = f"[{section}] {key}"
        converted = _convert(value, by_name[key], where, lineno)
        choices = _CHOICES.get((section, key))
        if choices and converted not in choices:
            raise ConfigError(f"{where}: {converted!r} is not one of {choices}", lineno)
        setattr(target, key, converted)

    for name, sec in [(n, getattr(cfg, n)) for n in SECTIONS] + [(f"model {k}", v) for k, v in cfg.models.items()]:
        for f in fields(sec):
            if f.metadata.get("required") and f.name not in seen.get(name, ()):
                raise ConfigError(f"missing required key {f.name!r} in [{name}]", header_line.get(name))
    if len(cfg.path.models) < 1:
        raise ConfigError("[path] models must name at least one model", header_line.get("path"))
    for m in cfg.path.models:
        if m not in cfg.models:
            raise ConfigError(f"[path] references undefined model {m!r}", header_line.get("path"))
    if cfg.curriculum.reference and cfg.curriculum.reference not in cfg.models:
        raise ConfigError(f"[curriculum] reference {cfg.curriculum.reference!r} is not a defined model",
                          header_line.get("curriculum"))
    if not cfg.experiment.seeds:
        raise ConfigError("[experiment] seeds must not be empty", header_line.get("experiment"))
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def _format(value, f):
    if isinstance(value, list):
        sep = f.metadata.get("sep", ",")
        return (" " if sep == " " else ", ").join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    sections = [(n, getattr(cfg, n)) for n in SECTIONS] + [(f"model {k}", v) for k, v in cfg.models.items()]
    for name, sec in sections:
        out.append(f"[{name}]")
        for f in fields(sec):
            out.append(f"{f.name} = {_format(getattr(sec, f.name), f)}")
        out.append("")
    return "\n".join(out)


def replace_seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=list(seeds)))
