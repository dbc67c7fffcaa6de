"""Experiment configuration: defaults, JSON parsing and validation.

A config is a flat JSON object. Every key has a default, so an empty
document yields the full-scale protocol (256px, batch 1, Adam 1e-4, ...).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any, Optional

SCALES = ("c0", "c1", "c2")
VARIANTS = ("NICE", "JOINT", "GEN_COUPLED")
EXTRACTORS = ("identity", "random_conv", "external_adapter")


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types, or violated invariants."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    # architecture
    image_size: int = 256
    channels: int = 3
    base_filters: int = 64
    n_res_blocks: int = 6
    shared_depth: int = 3
    scales_enabled: tuple = SCALES
    ra_enabled: bool = True
    nice: bool = True
    variant: str = "NICE"
    # objective
    lambda_gan: float = 1.0
    lambda_cycle: float = 10.0
    lambda_recon: float = 10.0
    # optimisation
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 1
    iterations: int = 100_000
    seed: int = 0
    # data
    dataset_root: Optional[str] = None
    out_dir: Optional[str] = None
    resize_ratio: float = 286 / 256
    hflip_prob: float = 0.5
    synthetic_n: int = 100
    synthetic_n_test: int = 50
    synthetic_hue_x: float = 0.0
    synthetic_hue_y: float = 0.6
    # bookkeeping
    log_every: int = 100
    checkpoint_every: int = 10_000
    kid_subset_size: int = 1000
    kid_n_subsets: int = 1
    extractor: str = "random_conv"
    extractor_command: Optional[str] = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales_enabled"] = list(self.scales_enabled)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "ExperimentConfig":
        return parse_dict({**self.to_dict(), **changes})

    @property
    def resize_edge(self) -> int:
        return int(round(self.image_size * self.resize_ratio))

    def hash(self) -> str:
        """Digest of the settings that determine model shapes and training.

        Paths and logging cadence are left out so a run moved to another
        directory still matches its checkpoints.
        """
        skip = {"out_dir", "dataset_root", "log_every", "checkpoint_every",
                "iterations", "extractor", "extractor_command",
                "kid_subset_size", "kid_n_subsets"}
        d = {k: v for k, v in self.to_dict().items() if k not in skip}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_paper_config() -> ExperimentConfig:
    return ExperimentConfig()


def desk_config(**overrides) -> ExperimentConfig:
    """Small synthetic-data setup that trains in minutes on one CPU core."""
    base = dict(
        image_size=64,
        base_filters=16,
        scales_enabled=["c0", "c1"],
        iterations=2000,
        log_every=10,
        checkpoint_every=0,
        synthetic_n=100,
        synthetic_n_test=50,
    )
    base.update(overrides)
    return parse_dict(base)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_INT_KEYS = {k for k, f in _FIELDS.items() if f.type in ("int",)}
_FLOAT_KEYS = {k for k, f in _FIELDS.items() if f.type in ("float",)}
_BOOL_KEYS = {k for k, f in _FIELDS.items() if f.type in ("bool",)}
_OPT_STR_KEYS = {k for k, f in _FIELDS.items() if f.type in ("Optional[str]",)}
_STR_KEYS = {k for k, f in _FIELDS.items() if f.type in ("str",)}


def _coerce(key: str, value: Any):
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected boolean, got {value!r}")
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return int(value)
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if key in _OPT_STR_KEYS:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected string or null, got {value!r}")
    if key in _STR_KEYS:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected string, got {value!r}")
    if key == "scales_enabled":
        if isinstance(value, str):
            value = [s for s in value.split(",") if s]
        if not isinstance(value, (list, tuple)) or not all(isinstance(s, str) for s in value):
            raise ConfigError(f"scales_enabled: expected list of scale names, got {value!r}")
        return tuple(s for s in SCALES if s in value) + tuple(s for s in value if s not in SCALES)
    raise ConfigError(f"{key}: unknown key")


def validate(cfg: ExperimentConfig) -> list:
    """Return a list of invariant violations (empty when valid)."""
    bad = []
    for k in ("lambda_gan", "lambda_cycle", "lambda_recon"):
        if getattr(cfg, k) < 0:
            bad.append(f"{k} must be >= 0 (got {getattr(cfg, k)})")
    unknown = [s for s in cfg.scales_enabled if s not in SCALES]
    if unknown:
        bad.append(f"scales_enabled: unknown scales {unknown}")
    if not cfg.scales_enabled:
        bad.append("scales_enabled: at least one scale must be enabled")
    if not 0.0 <= cfg.hflip_prob <= 1.0:
        bad.append(f"hflip_prob must lie in [0, 1] (got {cfg.hflip_prob})")
    if cfg.image_size <= 0 or cfg.image_size % 32:
        bad.append(f"image_size must be a positive multiple of 32 (got {cfg.image_size})")
    elif "c2" in cfg.scales_enabled and cfg.image_size < 128:
        bad.append(f"image_size must be >= 128 when c2 is enabled (got {cfg.image_size})")
    if cfg.shared_depth not in (1, 2, 3, 4):
        bad.append(f"shared_depth must be one of 1,2,3,4 (got {cfg.shared_depth})")
    if cfg.variant not in VARIANTS:
        bad.append(f"variant must be one of {VARIANTS} (got {cfg.variant!r})")
    if cfg.extractor not in EXTRACTORS:
        bad.append(f"extractor must be one of {EXTRACTORS} (got {cfg.extractor!r})")
    for k in ("channels", "base_filters", "batch_size", "synthetic_n",
              "synthetic_n_test", "kid_subset_size", "kid_n_subsets"):
        if getattr(cfg, k) < 1:
            bad.append(f"{k} must be >= 1 (got {getattr(cfg, k)})")
    for k in ("n_res_blocks", "iterations", "log_every", "checkpoint_every"):
        if getattr(cfg, k) < 0:
            bad.append(f"{k} must be >= 0 (got {getattr(cfg, k)})")
    if cfg.lr < 0 or cfg.weight_decay < 0:
        bad.append("lr and weight_decay must be >= 0")
    for k in ("adam_beta1", "adam_beta2"):
        if not 0.0 <= getattr(cfg, k) < 1.0:
            bad.append(f"{k} must lie in [0, 1) (got {getattr(cfg, k)})")
    if cfg.resize_ratio < 1.0:
        bad.append(f"resize_ratio must be >= 1 (got {cfg.resize_ratio})")
    return bad


def parse_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key")
        kwargs[key] = _coerce(key, value)
    cfg = ExperimentConfig(**kwargs)
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_and_validate(text: str) -> ExperimentConfig:
    text = text.strip()
    if not text:
        return parse_dict({})
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    return parse_dict(doc)


def parse_override(item: str) -> tuple:
    """Split a ``KEY=VALUE`` override; VALUE is read as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form KEY=VALUE")
    key, raw = item.split("=", 1)
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if key in _OPT_STR_KEYS | _STR_KEYS and not isinstance(value, str) and value is not None:
        value = raw
    return key, value


def load_config(path: Optional[str] = None, overrides=()) -> ExperimentConfig:
    doc = {}
    if path:
        try:
            with open(path) as fh:
                text = fh.read().strip()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if text:
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for item in overrides:
        key, value = parse_override(item)
        doc[key] = value
    return parse_dict(doc)
