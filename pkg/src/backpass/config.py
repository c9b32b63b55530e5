"""Run configuration: one JSON file with a section per module, plus overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import CATEGORIES, DatasetConfig
from .encoder import EncoderConfig
from .learning import EmConfig
from .pipeline import ModelConfig, ObservationConfig


class ConfigError(ValueError):
    pass


@dataclass
class InferenceConfig:
    steps: int = 2
    beam: int = 1
    top_m: int = 15
    scales: list = field(default_factory=lambda: [1.0])


@dataclass
class SampleConfig:
    count: int = 10
    category: int = 0
    clamp_top: bool = False
    group: int = 5


@dataclass
class ProbeConfig:
    steps: int = 9
    category: int = 0
    distractor_size: int = 10


SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "encoder": EncoderConfig,
    "observation": ObservationConfig,
    "em": EmConfig,
    "inference": InferenceConfig,
    "sample": SampleConfig,
    "probe": ProbeConfig,
}
_SEEDED = ("dataset", "encoder", "em")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    em: EmConfig = field(default_factory=EmConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self):
        return asdict(self)

    def snapshot(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _section(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        obj = cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{name}': {e}") from None
    for k, v in raw.items():
        default = getattr(cls(), k)
        if isinstance(default, bool) != isinstance(v, bool) or (
                isinstance(default, (int, float)) and not isinstance(v, (int, float))):
            raise ConfigError(f"'{name}.{k}' has the wrong type")
    return obj


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"seed", "out", "threads"}
    unknown = sorted(set(raw) - top - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    cfg = RunConfig(**{k: raw[k] for k in top if k in raw})
    for name, cls in SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _section(cls, raw[name], name))
    return cfg


def load(path=None, seed=None, out=None, threads=None) -> RunConfig:
    """Read a JSON config (or defaults) and apply command-line overrides.

    The global seed is copied into every seeded section.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in config: {e}") from None
    cfg = from_dict(raw)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    if threads is not None:
        cfg.threads = threads
    validate(cfg)
    for name in _SEEDED:
        setattr(cfg, name, replace(getattr(cfg, name), seed=cfg.seed))
    return cfg


def validate(cfg: RunConfig):
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed must be a non-negative integer")
    need(isinstance(cfg.threads, int) and cfg.threads >= 1, "threads must be >= 1")
    need(isinstance(cfg.out, str) and cfg.out, "out must be a non-empty path")
    d = cfg.dataset
    need(d.n_train >= 0 and d.n_test_scenes >= 0 and d.n_scale_scenes >= 0, "dataset counts must be >= 0")
    need(0.0 <= d.occlusion_rate <= 1.0, "occlusion_rate must be in [0, 1]")
    need(d.clutter_count >= 0, "clutter_count must be >= 0")
    need(d.canvas == 32 and d.cell == 8, "only the 32x32 canvas with 8-pixel cells is supported")
    m = cfg.model
    need(m.top_mixtures >= 1 and m.mixtures >= 1, "mixture counts must be >= 1")
    need(m.top_offset >= 0 and m.offset >= 0, "offset ranges must be >= 0")
    need(m.ngram_order >= 0, "ngram_order must be >= 0")
    e = cfg.encoder
    need(e.epochs >= 0 and e.lr > 0 and e.batch >= 1, "invalid encoder settings")
    o = cfg.observation
    need(o.n_fit_scenes >= 2 and o.n_grid >= 1 and o.clutter_count >= 0, "invalid observation settings")
    em = cfg.em
    need(em.em_iters >= 0 and em.sgd_epochs_per_m >= 0 and em.lr > 0 and em.batch >= 1,
         "invalid em settings")
    need(em.alpha > 0, "em.alpha must be positive")
    i = cfg.inference
    need(i.steps >= 1 and i.beam >= 1 and i.top_m >= 1, "inference steps, beam and top_m must be >= 1")
    need(isinstance(i.scales, list) and i.scales and all(
        isinstance(s, (int, float)) and s > 0 for s in i.scales), "scales must be positive numbers")
    s = cfg.sample
    need(s.count >= 1 and s.group >= 1, "sample count and group must be >= 1")
    need(0 <= s.category < len(CATEGORIES), "unknown category")
    p = cfg.probe
    need(p.steps >= 2 and 1 <= p.distractor_size <= d.canvas, "invalid probe settings")
