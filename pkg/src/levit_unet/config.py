"""
Run configuration: YAML file with `model`, `train`, `data`, `eval`, `bench`
and `ablate` sections, validated before anything is built.
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union, get_args, get_origin

import yaml

from .encoder import VARIANTS
from .errors import ConfigurationError
from .metrics import HD_MODES, HD_POINTS
from .model import ModelConfig

logger = logging.getLogger(__name__)

SYNTHETIC_LR = 1e-3
MANIFEST_LR = 1e-5


@dataclass
class ModelSection:
    variant: str = "128s"
    num_classes: int = 9
    in_channels: int = 3
    num_skips: int = 4
    conv_only: bool = False
    decoder_widths: List[int] = field(default_factory=lambda: [512, 256, 128])
    img_size: int = 224

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            num_classes=self.num_classes,
            in_channels=self.in_channels,
            num_skips=self.num_skips,
            conv_only=self.conv_only,
            decoder_widths=tuple(self.decoder_widths),
            img_size=self.img_size,
        )


@dataclass
class TrainSection:
    lr: Optional[float] = None
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 350
    seed: int = 0
    checkpoint_dir: str = "runs/default"
    augment: bool = True
    ce_weight: float = 0.5
    pretrained_encoder: Optional[str] = None


@dataclass
class SyntheticSection:
    n_cases: int = 20
    slices_per_case: int = 10
    test_cases: int = 4
    size: int = 128
    seed: int = 0
    out_dir: Optional[str] = None


@dataclass
class DataSection:
    manifest: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None


@dataclass
class EvalSection:
    hd_mode: str = "p95"
    hd_points: str = "all"
    out: str = "metrics"
    checkpoint: Optional[str] = None
    split: str = "test"


@dataclass
class BenchSection:
    variants: List[str] = field(default_factory=lambda: ["128s", "192", "384"])
    input_size: int = 224
    batch: int = 1
    warmup_iters: int = 2
    measure_iters: int = 5
    fps: bool = True
    multi_thread: bool = True
    out: str = "bench"


@dataclass
class AblateSection:
    num_skips: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    conv_only: List[bool] = field(default_factory=lambda: [False, True])
    epochs: Optional[int] = None
    out: str = "ablation"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    @property
    def learning_rate(self) -> float:
        if self.train.lr is not None:
            return self.train.lr
        return MANIFEST_LR if self.data.manifest else SYNTHETIC_LR

    def validate(self) -> None:
        m = self.model
        if m.variant not in VARIANTS:
            raise ConfigurationError(f"model.variant: '{m.variant}' is not one of {sorted(VARIANTS)}")
        self.model.to_model_config().validate()
        t = self.train
        if t.lr is not None and t.lr <= 0:
            raise ConfigurationError(f"train.lr must be > 0, got {t.lr}")
        if t.weight_decay < 0:
            raise ConfigurationError(f"train.weight_decay must be >= 0, got {t.weight_decay}")
        if t.batch_size < 1:
            raise ConfigurationError(f"train.batch_size must be >= 1, got {t.batch_size}")
        if t.epochs < 0:
            raise ConfigurationError(f"train.epochs must be >= 0, got {t.epochs}")
        if not 0.0 <= t.ce_weight <= 1.0:
            raise ConfigurationError(f"train.ce_weight must lie in [0, 1], got {t.ce_weight}")
        if self.data.manifest and self.data.synthetic:
            raise ConfigurationError("data: give either 'manifest' or 'synthetic', not both")
        s = self.data.synthetic
        if s is not None:
            if s.size < 16 or s.size % 16:
                raise ConfigurationError(f"data.synthetic.size must be a positive multiple of 16, got {s.size}")
            if s.n_cases < 1 or s.slices_per_case < 1 or s.test_cases < 0:
                raise ConfigurationError(f"data.synthetic: invalid case counts {s}")
        if self.eval.hd_mode not in HD_MODES:
            raise ConfigurationError(f"eval.hd_mode: '{self.eval.hd_mode}' is not one of {HD_MODES}")
        if self.eval.hd_points not in HD_POINTS:
            raise ConfigurationError(f"eval.hd_points: '{self.eval.hd_points}' is not one of {HD_POINTS}")
        if self.eval.split not in ("train", "test"):
            raise ConfigurationError(f"eval.split: '{self.eval.split}' is not train or test")
        b = self.bench
        unknown = [v for v in b.variants if v not in VARIANTS]
        if unknown:
            raise ConfigurationError(f"bench.variants: unknown variants {unknown}")
        if b.input_size < 16 or b.input_size % 16:
            raise ConfigurationError(f"bench.input_size must be a positive multiple of 16, got {b.input_size}")
        if b.batch < 1 or b.warmup_iters < 0 or b.measure_iters < 1:
            raise ConfigurationError(f"bench: invalid timing settings {b}")
        a = self.ablate
        if any(not 0 <= n <= 4 for n in a.num_skips):
            raise ConfigurationError(f"ablate.num_skips values must lie in [0, 4], got {a.num_skips}")
        if a.epochs is not None and a.epochs < 0:
            raise ConfigurationError(f"ablate.epochs must be >= 0, got {a.epochs}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_dict()
        data["train"]["lr"] = self.learning_rate
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f, sort_keys=False)
        logger.debug(f"Wrote effective config to {path}")
        return path


_SECTION_TYPES = {
    "model": ModelSection,
    "train": TrainSection,
    "data": DataSection,
    "eval": EvalSection,
    "bench": BenchSection,
    "ablate": AblateSection,
}


def _coerce(where: str, value: Any, annotation: Any) -> Any:
    """Check a YAML value against a section field's declared type."""
    if get_origin(annotation) is Union:
        if value is None:
            return None
        inner = [a for a in get_args(annotation) if a is not type(None)][0]
        return _coerce(where, value, inner)
    if value is None:
        raise ConfigurationError(f"{where}: value is required")
    if get_origin(annotation) is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        inner = get_args(annotation)[0]
        return [_coerce(f"{where}[{i}]", v, inner) for i, v in enumerate(value)]
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigurationError(f"section '{name}' must be a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigurationError(f"section '{name}': unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        where = f"{name}.{key}"
        if cls is DataSection and key == "synthetic":
            kwargs[key] = None if value is None else _build_section(where, SyntheticSection, value)
        else:
            kwargs[key] = _coerce(where, value, fields[key].type)
    return cls(**kwargs)


def _apply_override(raw: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Load YAML (if given), apply dotted-key overrides, validate, and return the config."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except yaml.YAMLError as e:
            logger.error(f"Failed to parse config {path}: {e}")
            raise ConfigurationError(f"config file {path} is not valid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping of sections")
        raw = loaded
        logger.debug(f"Loaded config file {path}: {raw}")

    unknown = sorted(set(raw) - set(_SECTION_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown config sections {unknown}, expected {sorted(_SECTION_TYPES)}")

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        _apply_override(raw, dotted, value)
        logger.debug(f"Config override {dotted}={value!r}")

    config = RunConfig(**{name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTION_TYPES.items()})
    config.validate()
    return config


def default_config_path() -> Optional[str]:
    return os.getenv("CONFIG_PATH") or None
