"""Run configuration: YAML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .autodiff import OptimConfig
from .exceptions import ConfigError
from .model import ArchitectureConfig, preset
from .training.losses import LossWeights

# keys that do not change the computation and are left out of the hash
_UNHASHED = ("epochs", "output_dir", "checkpoint_every")


@dataclass
class TrainOptions:
    epochs: int = 40
    batch_size: int = 8
    precision: int = 32
    checkpoint_every: int = 10
    srec_target: str = "input"  # input: E_s(x) | style: E_s(s)
    distance: str = "avd"  # avd | sum
    r1_gradient: str = "analytic"  # analytic | finite_difference (slow cross-check)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.srec_target not in ("input", "style"):
            raise ConfigError("srec_target must be 'input' or 'style'")
        if self.distance not in ("avd", "sum"):
            raise ConfigError("distance must be 'avd' or 'sum'")
        if self.r1_gradient not in ("analytic", "finite_difference"):
            raise ConfigError("r1_gradient must be 'analytic' or 'finite_difference'")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class RunConfig:
    seed: int
    dataset: dict = field(default_factory=lambda: {"synth": {}})
    architecture: dict = field(default_factory=lambda: {"preset": "synth"})
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        if len(self.dataset) != 1 or next(iter(self.dataset)) not in ("synth", "manifest"):
            raise ConfigError("dataset needs exactly one of 'synth' or 'manifest'")

    def arch(self, n_vertices: int | None = None, n_styles: int | None = None) -> ArchitectureConfig:
        d = dict(self.architecture)
        name = d.pop("preset", "synth")
        if n_vertices is not None:
            d.setdefault("n_vertices", n_vertices)
        if n_styles is not None:
            d.setdefault("n_styles", n_styles)
        try:
            return preset(name, **d)
        except TypeError as exc:
            raise ConfigError(f"bad architecture override: {exc}") from None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "dataset": copy.deepcopy(self.dataset),
                "architecture": copy.deepcopy(self.architecture),
                "loss": dataclasses.asdict(self.loss), "optim": dataclasses.asdict(self.optim),
                "train": dataclasses.asdict(self.train), "output_dir": self.output_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        if "seed" not in d:
            raise ConfigError("seed is mandatory")
        known = {"seed", "dataset", "architecture", "loss", "optim", "train", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(seed=d["seed"],
                       dataset=dict(d.get("dataset") or {"synth": {}}),
                       architecture=dict(d.get("architecture") or {"preset": "synth"}),
                       loss=LossWeights(**(d.get("loss") or {})),
                       optim=OptimConfig(**(d.get("optim") or {})),
                       train=TrainOptions(**(d.get("train") or {})),
                       output_dir=str(d.get("output_dir", "runs/default")))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        for k in _UNHASHED:
            d["train"].pop(k, None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(value)
    return d


def load_config(path=None, overrides=None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(apply_overrides(d, overrides))
