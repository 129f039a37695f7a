"""Experiment configuration: a YAML tree mapped onto strict dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .amsd import AmsdConfig
from .distill import DistillConfig
from .htrm import HtrmConfig
from .scenes import DomainSpec, MixtureSpec

CELLS = ("baseline", "amsd", "htrm", "trkp", "htrm_image", "trkp_image")


class ConfigError(ValueError):
    pass


@dataclass
class ScenesConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    max_objects: int = 4
    n_source: int = 512
    n_source_test: int = 64
    n_target_train: int = 1024
    n_target_test: int = 128


@dataclass
class SourceEntry:
    domain_id: str
    intensity_offset: float = 0.0
    noise_sigma: float = 0.0
    scale_factor: float = 1.0
    class_prior: list[float] | None = None
    seed: int = 0


@dataclass
class TargetEntry:
    domain_id: str = "T"
    weights: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 9


@dataclass
class ModelSection:
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    kernels: list[int] = field(default_factory=lambda: [5, 5, 3])
    hidden: int = 32


@dataclass
class EvalSection:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    match_iou: float = 0.5


@dataclass
class ExperimentSection:
    cells: list[str] = field(default_factory=lambda: ["baseline", "amsd", "htrm", "trkp", "htrm_image"])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    finetune_epochs: int = 10
    k_prime_sweep: list[int] = field(default_factory=lambda: [3, 5, 10, 30])
    cell: str = "trkp"     # cell used by the single-stage subcommands


def _default_sources() -> list[SourceEntry]:
    return [SourceEntry("S1", -0.2, 0.03, 1.0, None, 1),
            SourceEntry("S2", 0.3, 0.10, 1.5, None, 2),
            SourceEntry("S3", -0.4, 0.15, 0.6, None, 3)]


@dataclass
class ExperimentConfig:
    seed: int = 1
    out: str = "runs/trkp"
    threads: int = 1
    precision: str = "f32"
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    sources: list[SourceEntry] = field(default_factory=_default_sources)
    target: TargetEntry = field(default_factory=TargetEntry)
    model: ModelSection = field(default_factory=ModelSection)
    # desk-scale calibration, see README: longer pre-training, a pseudo-label
    # threshold matched to the focal-loss score scale, a near-frozen EMA teacher
    amsd: AmsdConfig = field(default_factory=lambda: AmsdConfig(lr=0.03, epochs=30))
    htrm: HtrmConfig = field(default_factory=HtrmConfig)
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(confidence_threshold=0.3, ema=0.9999,
                                                                         lr=0.003))
    eval: EvalSection = field(default_factory=EvalSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision: expected f32 or f64, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if not self.sources:
            raise ConfigError("sources: at least one source domain required")
        if len(self.target.weights) != len(self.sources):
            raise ConfigError("target.weights: one weight per source required")
        for c in self.experiment.cells + [self.experiment.cell]:
            if c not in CELLS:
                raise ConfigError(f"experiment.cells: unknown cell {c!r} (choose from {CELLS})")
        try:
            self.domain_specs(self.seed)
        except ValueError as exc:
            raise ConfigError(f"sources/target: {exc}") from None

    # -- derived objects --------------------------------------------------

    def domain_specs(self, run_seed: int) -> tuple[list[DomainSpec], MixtureSpec]:
        c = self.scenes.num_classes
        specs = []
        for s in self.sources:
            prior = tuple(s.class_prior) if s.class_prior is not None else tuple([1 / c] * c)
            specs.append(DomainSpec(s.domain_id, s.intensity_offset, s.noise_sigma, s.scale_factor,
                                    prior, derive_seed(run_seed, s.seed), self.scenes.max_objects))
        mix = MixtureSpec(self.target.domain_id, tuple(specs), tuple(self.target.weights),
                          derive_seed(run_seed, self.target.seed))
        return specs, mix

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def derive_seed(run_seed: int, base: int) -> int:
    return int(run_seed) * 1_000_003 + int(base)


# ---------------------------------------------------------------------------
# loading


class _LineLoader(yaml.SafeLoader):
    pass


class _Mapping(dict):
    lines: dict


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Mapping()
    out.lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _where(mapping, key, path) -> str:
    line = getattr(mapping, "lines", {}).get(key)
    return f"{path}{key}" + (f" (line {line})" if line else "")


_NESTED = {"scenes": ScenesConfig, "target": TargetEntry, "model": ModelSection, "amsd": AmsdConfig,
           "htrm": HtrmConfig, "distill": DistillConfig, "eval": EvalSection,
           "experiment": ExperimentSection}


def _build(cls, data: Any, path: str, base=None):
    """Dataclass from a mapping; a partial section keeps the remaining fields of ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path.rstrip('.') or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{_where(data, key, path)}: unknown key")
        if cls is ExperimentConfig and key in _NESTED:
            value = _build(_NESTED[key], value, f"{key}.", getattr(ExperimentConfig(), key))
        elif cls is ExperimentConfig and key == "sources":
            if not isinstance(value, list):
                raise ConfigError(f"{_where(data, key, path)}: expected a list")
            value = [_build(SourceEntry, v, f"sources[{i}].") for i, v in enumerate(value)]
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path.rstrip('.') or 'config'}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or start from defaults) and apply CLI overrides."""
    data: dict = _Mapping()
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.load(text, Loader=_LineLoader)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if loaded is not None:
            data = loaded
    cfg = _build(ExperimentConfig, data, "")
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.validate()
    return cfg
