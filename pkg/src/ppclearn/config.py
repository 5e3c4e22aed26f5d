"""Run configuration: a YAML file mapped onto the module settings records.

Schema (every section optional; omitted keys keep their defaults)::

    root_seed: 0
    scenes:   {n_cases: 12, kind: vertebra, params: {}, first_index: 0}
    starts:   {count: 600, mtre_range: [0, 30], bin_width: 1.0, seed: 0}
    corpus:   {n_cases: 16, first_index: 1000, count: 40, mtre_range: [0, 10], bin_width: 1.0,
               validation_fraction: 0.15}
    sim:      CorrSimConfig fields (sigma_d, outlier_rate, outlier_mode, ...)
    train:    TrainConfig fields (lam, points_per_sample, epochs, ...)
    variant:  PPC-L
    levels:   [0.25, 0.5, 1.0]
    bin_width: 1.0
    jobs:     null   # null means all available cores
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffreg import TrainConfig
from .errors import ConfigError
from .pipeline import LEVEL_SCALES, VARIANTS
from .simscene import PHANTOM_DEFAULTS, CorrSimConfig, StartPoseSpec


@dataclass
class SceneSpec:
    n_cases: int = 12
    kind: str = "vertebra"
    params: dict = field(default_factory=dict)
    first_index: int = 0


@dataclass
class CorpusSpec:
    """Training scenes and their small-error start poses."""

    n_cases: int = 16
    first_index: int = 1000
    count: int = 40
    mtre_range: tuple[float, float] = (0.0, 10.0)
    bin_width: float = 1.0
    validation_fraction: float = 0.15

    def start_spec(self, seed: int = 0) -> StartPoseSpec:
        return StartPoseSpec(self.count, tuple(self.mtre_range), self.bin_width, seed)


def _benchmark_sim() -> CorrSimConfig:
    return CorrSimConfig(sigma_d=1.2, outlier_rate=0.4, outlier_mode="distractor", search_range=5.0,
                         matching="edge", noise_length=10.0)


@dataclass
class RunConfig:
    root_seed: int = 0
    scenes: SceneSpec = field(default_factory=SceneSpec)
    starts: StartPoseSpec = field(default_factory=StartPoseSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    sim: CorrSimConfig = field(default_factory=_benchmark_sim)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: str = "PPC-L"
    levels: tuple[float, ...] = LEVEL_SCALES
    bin_width: float = 1.0
    jobs: int | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sim"] = self.sim.to_dict()
        d["levels"] = list(self.levels)
        d["starts"]["mtre_range"] = list(self.starts.mtre_range)
        d["corpus"]["mtre_range"] = list(self.corpus.mtre_range)
        return d


_SECTIONS = {"scenes": SceneSpec, "starts": StartPoseSpec, "corpus": CorpusSpec, "sim": CorrSimConfig,
             "train": TrainConfig}
_TUPLES = {"mtre_range", "ngc_inlier", "ngc_outlier"}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    vals = {k: tuple(v) if k in _TUPLES and isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**vals)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    if data is not None and not isinstance(data, dict):
        raise ConfigError("top level: expected a mapping")
    data = dict(data or {})
    cfg = RunConfig()
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in sorted(set(data) - top):
        raise ConfigError(f"{key}: unknown key")
    for key, value in data.items():
        if key in _SECTIONS:
            if value is not None and not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            base = dataclasses.asdict(getattr(cfg, key)) if key != "sim" else cfg.sim.to_dict()
            base.update(value or {})
            setattr(cfg, key, _build(_SECTIONS[key], base, key))
        elif key == "levels":
            setattr(cfg, key, tuple(value))
        else:
            setattr(cfg, key, value)
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_config(cfg: RunConfig) -> list[str]:
    """Human-readable problems, each prefixed with its field path; empty when valid."""
    out = []
    if not isinstance(cfg.root_seed, int) or isinstance(cfg.root_seed, bool) or cfg.root_seed < 0:
        out.append("root_seed: must be a non-negative integer")
    sc = cfg.scenes
    if not isinstance(sc.n_cases, int) or sc.n_cases < 1:
        out.append("scenes.n_cases: must be a positive integer")
    if sc.kind not in PHANTOM_DEFAULTS:
        out.append(f"scenes.kind: must be one of {', '.join(sorted(PHANTOM_DEFAULTS))}")
    if not isinstance(sc.first_index, int) or sc.first_index < 0:
        out.append("scenes.first_index: must be a non-negative integer")
    out += [f"starts.{m}" for m in cfg.starts.validate()]
    cp = cfg.corpus
    if not isinstance(cp.n_cases, int) or cp.n_cases < 1:
        out.append("corpus.n_cases: must be a positive integer")
    out += [f"corpus.{m}" for m in cp.start_spec().validate()]
    if not (_num(cp.validation_fraction) and 0 <= cp.validation_fraction < 1):
        out.append("corpus.validation_fraction: must lie in [0, 1)")
    out += [f"sim.{m}" for m in cfg.sim.validate()]
    tr = cfg.train
    if not (_num(tr.lam) and tr.lam >= 0):
        out.append("train.lam: must be >= 0")
    if not isinstance(tr.points_per_sample, int) or tr.points_per_sample < 6:
        out.append("train.points_per_sample: must be an integer >= 6 (six motion parameters)")
    for name in ("batch_size", "epochs"):
        v = getattr(tr, name)
        if not isinstance(v, int) or v < 1:
            out.append(f"train.{name}: must be a positive integer")
    if tr.steps_per_epoch is not None and (not isinstance(tr.steps_per_epoch, int) or tr.steps_per_epoch < 1):
        out.append("train.steps_per_epoch: must be a positive integer or null")
    if not (_num(tr.step_size) and tr.step_size > 0):
        out.append("train.step_size: must be positive")
    for name in ("beta1", "beta2"):
        v = getattr(tr, name)
        if not (_num(v) and 0 <= v < 1):
            out.append(f"train.{name}: must lie in [0, 1)")
    if not (_num(tr.translate_range) and tr.translate_range >= 0):
        out.append("train.translate_range: must be >= 0")
    if cfg.variant not in VARIANTS:
        out.append(f"variant: must be one of {', '.join(VARIANTS)}")
    lv = list(cfg.levels)
    if not lv or not all(_num(s) and 0 < s <= 1 for s in lv):
        out.append("levels: must be a non-empty list of scales in (0, 1]")
    elif any(b <= a for a, b in zip(lv, lv[1:])):
        out.append("levels: scales must increase from coarse to fine")
    if not (_num(cfg.bin_width) and cfg.bin_width > 0):
        out.append("bin_width: must be positive")
    if cfg.jobs is not None and (not isinstance(cfg.jobs, int) or cfg.jobs < 1):
        out.append("jobs: must be a positive integer or null")
    return out
