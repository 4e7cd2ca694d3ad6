"""Experiment configuration stored as TOML.

Every key has a default and unknown keys are rejected, so a typo fails loudly
instead of silently training with a default. Example::

    [experiment]
    task = "mnist"
    seed = 0
    out = "runs/mnist_ot"

    [data]
    path = "data/mnist"
    per_class = 100
    test_per_class = 50

    [model]
    variant = "ot"
    d = 64
    k = 64
    fc_mult = 0

    [train]
    lam = 0.01
    lr = 0.0005
    lr_drops = [35, 41]
    epochs = 45
    batch_size = 100
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import (
    TaskData,
    cache_key,
    gen_parity,
    gen_pointcloud,
    load_mnist_subset,
    load_task_cache,
    save_task_cache,
)
from .training import DEFAULT_LAMBDA, EXPLOSION_THRESHOLD, TrainConfig, model_config_for, step_schedule

TASKS = ("mnist", "parity", "pointcloud")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    seed: int = 0
    cache_dir: str = ""
    # mnist
    path: str = "data/mnist"
    per_class: int = 100
    test_per_class: int = 50
    # parity / pointcloud
    count: int = 1000
    test_count: int = 250
    max_len: int = 16
    min_len: int = 1
    points_per_cloud: int = 64


@dataclass
class ModelSection:
    variant: str = "ot"
    d: int = 64
    k: int = 64
    heads: int = 1
    depth: int = 1
    fc_mult: int = 4
    activation: str = "gelu"
    scheme: str = "euler"
    steps: int = 20
    horizon: float = 1.0
    precision: str = "f32"


@dataclass
class TrainSection:
    # negative means "use the task default"
    lam: float = -1.0
    lr: float = 1e-3
    lr_drops: list = field(default_factory=list)
    lr_factor: float = 0.1
    epochs: int = 45
    batch_size: int = 100
    # 0 disables clipping
    grad_clip: float = 0.0
    explosion_threshold: float = EXPLOSION_THRESHOLD


@dataclass
class ExperimentConfig:
    task: str = "mnist"
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")

    @property
    def lam(self) -> float:
        return DEFAULT_LAMBDA[self.task] if self.train.lam < 0 else self.train.lam


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection}
TOP_LEVEL = ("task", "seed", "out")


def _coerce(section: str, f: dataclasses.Field, value):
    target = type(f.default) if f.default is not dataclasses.MISSING else list
    where = f"{section}.{f.name}"
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target is list:
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers")
        return list(value)
    if type(value) is not target:
        raise ConfigError(f"{where} must be {target.__name__}, got {type(value).__name__}")
    return value


def _build(section: str, cls, table: dict):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return cls(**{k: _coerce(section, known[k], v) for k, v in table.items()})


def from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    top = doc.pop("experiment", {})
    if not isinstance(top, dict):
        raise ConfigError("[experiment] must be a table")
    unknown = sorted(set(doc) - set(SECTIONS)) + sorted(f"experiment.{k}" for k in set(top) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    kwargs = {}
    for key in TOP_LEVEL:
        if key in top:
            f = next(x for x in fields(ExperimentConfig) if x.name == key)
            kwargs[key] = _coerce("experiment", f, top[key])
    for name, cls in SECTIONS.items():
        kwargs[name] = _build(name, cls, doc.get(name, {}))
    return ExperimentConfig(**kwargs)


def to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "experiment": {"task": cfg.task, "seed": cfg.seed, "out": cfg.out},
        **{name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS},
    }


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(doc)


def render_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# materialisation
# ---------------------------------------------------------------------------

def build_data(cfg: ExperimentConfig) -> TaskData:
    ds = cfg.data
    if cfg.task == "mnist":
        sizes = dict(per_class=ds.per_class, test_per_class=ds.test_per_class)
    elif cfg.task == "parity":
        sizes = dict(count=ds.count, test_count=ds.test_count, max_len=ds.max_len, min_len=ds.min_len)
    else:
        sizes = dict(count=ds.count, test_count=ds.test_count, points=ds.points_per_cloud)
    key = cache_key(cfg.task, ds.seed, **sizes)
    if ds.cache_dir:
        hit = load_task_cache(ds.cache_dir, key)
        if hit is not None:
            return hit
    if cfg.task == "mnist":
        data = load_mnist_subset(ds.path, ds.per_class, ds.seed, ds.test_per_class)
    elif cfg.task == "parity":
        data = gen_parity(ds.count, ds.max_len, ds.seed, test_count=ds.test_count, min_len=ds.min_len)
    else:
        data = gen_pointcloud(ds.count, ds.points_per_cloud, ds.seed, test_count=ds.test_count)
    if ds.cache_dir:
        save_task_cache(data, ds.cache_dir, key)
    return data


def build_train_config(cfg: ExperimentConfig, data: TaskData) -> TrainConfig:
    m = cfg.model
    model = model_config_for(
        data, variant=m.variant, d=m.d, k=m.k, heads=m.heads, depth=m.depth, fc_mult=m.fc_mult,
        activation=m.activation, scheme=m.scheme, steps=m.steps, horizon=m.horizon,
        precision=m.precision,
    )
    t = cfg.train
    return TrainConfig(
        model=model,
        lam=cfg.lam,
        lr_schedule=step_schedule(t.epochs, t.lr, t.lr_drops, t.lr_factor),
        epochs=t.epochs,
        batch_size=t.batch_size,
        seed=cfg.seed,
        grad_clip=t.grad_clip if t.grad_clip > 0 else None,
        explosion_threshold=t.explosion_threshold,
        task=cfg.task,
    )


__all__ = [
    "ConfigError", "ExperimentConfig", "DataSection", "ModelSection", "TrainSection",
    "parse_config", "render_config", "load_config", "from_dict", "to_dict",
    "build_data", "build_train_config",
]
