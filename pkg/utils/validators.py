"""
Configuration schemas and override parsing for ganaug experiments
"""
import copy
import hashlib
import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError

SPLITS = ("train", "validation")
SPLIT_ALIASES = {"val": "validation", "valid": "validation", "training": "train"}
REGIMES = ("baseline", "aug_same_data", "aug_pretrained")

Regime = Literal["baseline", "aug_same_data", "aug_pretrained"]


def normalize_split(value: str) -> str:
    """Map split aliases ("val") onto the canonical names"""
    value = value.strip().lower()
    value = SPLIT_ALIASES.get(value, value)
    if value not in SPLITS:
        raise ValueError(f"Invalid split '{value}', expected one of {SPLITS}")
    return value


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthConfig(StrictModel):
    """Synthetic blob benchmark: class 1 carries a Gaussian blob, class 0 only noise"""
    counts: Dict[str, Dict[int, int]] = Field(
        default_factory=lambda: {"train": {0: 180, 1: 20}, "validation": {0: 45, 1: 5}}
    )
    image_size: int = Field(64, ge=8, le=1024)
    background: float = Field(0.3, ge=0.0, le=1.0)
    noise_std: float = Field(0.08, ge=0.0, le=1.0)
    blob_amplitude: float = Field(0.45, ge=0.0, le=1.0)
    blob_sigma: float = Field(3.0, gt=0.0)
    blob_margin: int = Field(8, ge=0)

    @field_validator('counts')
    @classmethod
    def validate_counts(cls, v):
        """Canonical split names, labels 0/1 only, non-negative counts"""
        counts: Dict[str, Dict[int, int]] = {}
        for split, per_label in v.items():
            split = normalize_split(split)
            for label, count in per_label.items():
                if label not in (0, 1):
                    raise ValueError(f"Invalid label {label} in counts for split {split}")
                if count < 0:
                    raise ValueError(f"Negative count for split {split}, label {label}")
            counts[split] = {0: per_label.get(0, 0), 1: per_label.get(1, 0)}
        return counts

    @model_validator(mode='after')
    def validate_margin(self):
        if 2 * self.blob_margin >= self.image_size:
            raise ValueError("blob_margin leaves no room for blob centres")
        return self


class GanConfig(StrictModel):
    """Cycle-consistent translation networks and their training loop"""
    resolution: int = Field(64, ge=4)
    channels: int = Field(3, ge=1, le=4)
    residual_blocks: int = Field(3, ge=0)
    generator_filters: int = Field(64, ge=1)
    discriminator_filters: int = Field(64, ge=1)
    discriminator_layers: int = Field(3, ge=1)
    epochs: int = Field(30, ge=0)
    finetune_epochs: int = Field(10, ge=0)
    batch_size: int = Field(4, ge=1)
    max_steps_per_epoch: Optional[int] = Field(None, ge=1)
    lr: float = Field(2e-4, ge=0.0)
    beta1: float = Field(0.5, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    decay_start: float = Field(0.5, ge=0.0, le=1.0)
    lambda_cyc: float = Field(10.0, ge=0.0)
    identity_loss: bool = False
    identity_weight: float = Field(0.5, ge=0.0)
    replay_capacity: int = Field(50, ge=0)
    checkpoint_every: int = Field(5, ge=1)
    probe_size: int = Field(4, ge=1)

    @field_validator('resolution')
    @classmethod
    def validate_resolution(cls, v):
        """Two stride-2 stages in the generator need a multiple of 4"""
        if v % 4:
            raise ValueError("GAN resolution must be divisible by 4")
        return v


class ClassifierConfig(StrictModel):
    """Dense-connectivity binary classifier with a single-logit head"""
    resolution: int = Field(224, ge=8)
    channels: int = Field(3, ge=1, le=4)
    growth_rate: int = Field(32, ge=1)
    block_config: Tuple[int, ...] = (6, 12, 24, 16)
    num_init_features: int = Field(64, ge=1)
    bn_size: int = Field(4, ge=1)
    stem: Literal["imagenet", "compact"] = "imagenet"
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(16, ge=1)
    eval_batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, ge=0.0)
    plateau_factor: float = Field(0.1, gt=0.0, lt=1.0)
    plateau_patience: int = Field(2, ge=0)
    early_stop_patience: int = Field(5, ge=1)
    pretrained_path: Optional[Path] = None
    input_mean: Tuple[float, ...] = (0.485, 0.456, 0.406)
    input_std: Tuple[float, ...] = (0.229, 0.224, 0.225)

    @field_validator('block_config')
    @classmethod
    def validate_blocks(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("block_config needs at least one block of at least one layer")
        return v

    @field_validator('input_std')
    @classmethod
    def validate_std(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("input_std entries must be positive")
        return v

    def channel_stats(self) -> Tuple[List[float], List[float]]:
        """Per-channel mean/std, cycling the configured values to `channels`"""
        if self.channels == len(self.input_mean) and self.channels == len(self.input_std):
            return list(self.input_mean), list(self.input_std)
        if self.channels == 1:
            return [sum(self.input_mean) / len(self.input_mean)], [sum(self.input_std) / len(self.input_std)]
        return ([self.input_mean[i % len(self.input_mean)] for i in range(self.channels)],
                [self.input_std[i % len(self.input_std)] for i in range(self.channels)])


class DataConfig(StrictModel):
    primary_manifest: Optional[Path] = None
    pretrain_manifest: Optional[Path] = None
    synth: Optional[SynthConfig] = None
    pretrain_synth: Optional[SynthConfig] = None
    pretrain_seed_offset: int = 1000
    load_workers: int = Field(4, ge=1)

    @model_validator(mode='after')
    def validate_sources(self):
        if self.primary_manifest is None and self.synth is None:
            raise ValueError("data needs primary_manifest or a synth section")
        return self

    @property
    def has_pretrain(self) -> bool:
        return self.pretrain_manifest is not None or self.pretrain_synth is not None


class ExperimentConfig(StrictModel):
    """Whole experiment: data, GAN, classifier and the regimes to compare"""
    name: str = Field("experiment", min_length=1, max_length=128)
    seed: int = Field(0, ge=0)
    output_dir: Optional[Path] = None
    resolution: int = Field(224, ge=8)
    channels: int = Field(3, ge=1, le=4)
    num_threads: int = Field(1, ge=1)
    regimes: List[Regime] = Field(default_factory=lambda: ["baseline", "aug_same_data"])
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    cam_samples: int = Field(8, ge=0)
    difference_samples: int = Field(6, ge=0)
    data: DataConfig
    gan: GanConfig = Field(default_factory=GanConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)

    @field_validator('regimes')
    @classmethod
    def validate_regimes(cls, v):
        if not v:
            raise ValueError("At least one regime is required")
        # Stable order, no duplicates
        return [r for r in REGIMES if r in v]

    @model_validator(mode='after')
    def propagate_and_check(self):
        if "aug_pretrained" in self.regimes and not self.data.has_pretrain:
            raise ValueError("regime aug_pretrained requires data.pretrain_manifest or data.pretrain_synth")
        for name, section in (("gan", self.gan), ("classifier", self.classifier)):
            for field in ("resolution", "channels"):
                top, own = getattr(self, field), getattr(section, field)
                if own == top:
                    continue
                if field in section.model_fields_set:
                    # ConfigError is not a ValueError, so pydantic lets it through with its key
                    raise ConfigError(f"{name}.{field}={own} conflicts with {field}={top}; "
                                      f"set the top-level {field} instead", key=f"{name}.{field}")
                setattr(section, field, top)
        return self

    def config_hash(self) -> str:
        return stable_hash(self.model_dump(mode="json", exclude={"output_dir"}))


def stable_hash(payload: Any, length: int = 16) -> str:
    """SHA-256 over canonical JSON"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def parse_override(raw: str) -> Tuple[str, Any]:
    """Parse `section.key=value`; the value is read as a TOML literal when possible"""
    if "=" not in raw:
        raise ConfigError(f"Override '{raw}' must look like key=value")
    key, text = raw.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"Override '{raw}' has an empty key")
    try:
        value = tomllib.loads(f"value = {text.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = text.strip()
    return key, value


def apply_overrides(raw_config: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply dotted overrides to a raw (unvalidated) config mapping"""
    config = copy.deepcopy(raw_config)
    for item in overrides:
        key, value = parse_override(item)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override key '{key}': '{part}' is not a section", key=key)
            node = child
        node[parts[-1]] = value
    return config


def _resolve_paths(raw: Dict[str, Any], base_dir: Path) -> Dict[str, Any]:
    """Resolve relative paths against the config file's directory"""
    raw = copy.deepcopy(raw)

    def resolve(value):
        if isinstance(value, str) and value and not os.path.isabs(value):
            return str((base_dir / value).resolve())
        return value

    data = raw.get("data")
    if isinstance(data, dict):
        for key in ("primary_manifest", "pretrain_manifest"):
            if key in data:
                data[key] = resolve(data[key])
    if "output_dir" in raw:
        raw["output_dir"] = resolve(raw["output_dir"])
    classifier = raw.get("classifier")
    if isinstance(classifier, dict) and "pretrained_path" in classifier:
        classifier["pretrained_path"] = resolve(classifier["pretrained_path"])
    return raw


def _format_validation_error(error: ValidationError) -> Tuple[str, Optional[str]]:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ()))
    if first.get("type") == "extra_forbidden":
        return f"Unknown config key '{key}'", key
    return f"Invalid value for '{key or '<root>'}': {first.get('msg')}", key or None


def build_experiment_config(raw: Dict[str, Any], overrides: Optional[List[str]] = None,
                            base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate a raw mapping (+ overrides) into an ExperimentConfig"""
    merged = apply_overrides(raw, overrides or [])
    if base_dir is not None:
        merged = _resolve_paths(merged, base_dir)
    if merged.get("output_dir") is None and os.getenv("GANAUG_OUTPUT_DIR"):
        merged["output_dir"] = os.getenv("GANAUG_OUTPUT_DIR")
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        message, key = _format_validation_error(e)
        raise ConfigError(message, key=key) from e


def load_experiment_config(path: Path, overrides: Optional[List[str]] = None) -> ExperimentConfig:
    """Read a TOML experiment config"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e
    return build_experiment_config(raw, overrides, base_dir=path.resolve().parent)
