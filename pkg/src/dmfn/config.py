"""Run configuration: one JSON document, dotted-path overrides, stable hash.

Schema (every key optional, defaults shown by ``RunConfig().to_dict()``)::

    {
      "train":  {learning_rate, adam_beta1, adam_beta2, batch_size, iterations, seed,
                 image_size, max_hole, local_patch, mask_protocol, checkpoint_every,
                 sample_every, lr_decay_every, lr_decay_gamma, grad_clip},
      "loss":   {lambda_, eta, mu, gamma, metric: "l2"|"gaussian"|"dot_product", sigma},
      "generator": {base_width, num_dmfb, branch_channels, dilations, wide_ablation},
      "discriminator": {global_layers, local_layers, base_width, max_width},
      "data":   {root, policy, split, eval_split},
      "paths":  {vgg_weights, vgg_sha256, irregular_mask_dir, output_dir},
      "ablation": "full_dmfb" | "no_Ki" | "no_combination" | "rate=<k>",
      "debug_maps": false
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .core import ContractError, LossWeights, TrainConfig
from .data import DatasetSpec
from .discriminator import DiscriminatorConfig
from .generator import AblationVariant, DMFBConfig, GeneratorConfig
from .losses import DistanceMetric


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class LossConfig:
    lambda_: float = 25.0
    eta: float = 5.0
    mu: float = 0.003
    gamma: float = 1.0
    metric: str = "l2"
    sigma: float = 1.0


@dataclass
class GeneratorSection:
    base_width: int = 64
    num_dmfb: int = 8
    branch_channels: int = 64
    dilations: list = field(default_factory=lambda: [1, 2, 4, 8])
    wide_ablation: bool = False


@dataclass
class DiscriminatorSection:
    global_layers: int = 6
    local_layers: int = 5
    base_width: int = 64
    max_width: int = 512


@dataclass
class DataSection:
    root: str = "data"
    policy: str = "generic"
    split: str = "train"
    eval_split: str = "val"


@dataclass
class PathsSection:
    vgg_weights: str | None = None
    vgg_sha256: str | None = None
    irregular_mask_dir: str | None = None
    output_dir: str = "runs/default"


def _train_defaults() -> dict:
    return asdict(TrainConfig())


@dataclass
class RunConfig:
    train: dict = field(default_factory=_train_defaults)
    loss: LossConfig = field(default_factory=LossConfig)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    ablation: str = "full_dmfb"
    debug_maps: bool = False

    # -- construction -----------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level config key(s): {', '.join(sorted(unknown))}")
        for key, value in raw.items():
            current = getattr(cfg, key)
            if isinstance(current, dict):
                bad = set(value) - set(current)
                if bad:
                    raise ConfigError(f"unknown key(s) in '{key}': {', '.join(sorted(bad))}")
                current.update(value)
            elif hasattr(current, "__dataclass_fields__"):
                if not isinstance(value, dict):
                    raise ConfigError(f"'{key}' must be an object")
                names = {f.name for f in fields(current)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown key(s) in '{key}': {', '.join(sorted(bad))}")
                for k, v in value.items():
                    setattr(current, k, v)
            else:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        raw: dict = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        for dotted, value in (overrides or {}).items():
            apply_override(raw, dotted, value)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    # -- typed views --------------------------------------------------------------------
    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train)
        except (TypeError, ContractError) as e:
            raise ConfigError(f"train: {e}") from e

    def loss_weights(self) -> LossWeights:
        l = self.loss
        try:
            return LossWeights(l.lambda_, l.eta, l.mu, l.gamma)
        except ContractError as e:
            raise ConfigError(f"loss: {e}") from e

    def metric(self) -> DistanceMetric:
        try:
            return DistanceMetric(self.loss.metric, float(self.loss.sigma))
        except (ContractError, TypeError, ValueError) as e:
            raise ConfigError(f"loss.metric: {e}") from e

    def variant(self) -> AblationVariant:
        try:
            return AblationVariant.parse(str(self.ablation), wide=bool(self.generator.wide_ablation))
        except ContractError as e:
            raise ConfigError(f"ablation: {e}") from e

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        try:
            dm = DMFBConfig(4 * g.base_width, g.branch_channels, tuple(g.dilations))
            return GeneratorConfig(base_width=g.base_width, bottleneck_channels=4 * g.base_width,
                                   num_dmfb=g.num_dmfb, dmfb=dm, variant=self.variant())
        except (ContractError, TypeError) as e:
            raise ConfigError(f"generator: {e}") from e

    def discriminator_config(self) -> DiscriminatorConfig:
        d = self.discriminator
        try:
            return DiscriminatorConfig(d.global_layers, d.local_layers, d.base_width, d.max_width)
        except (ContractError, TypeError) as e:
            raise ConfigError(f"discriminator: {e}") from e

    def dataset(self, split: str | None = None) -> DatasetSpec:
        try:
            return DatasetSpec(self.data.root, self.data.policy, split or self.data.split,
                               int(self.train["image_size"]))
        except ContractError as e:
            raise ConfigError(f"data: {e}") from e

    def validate(self) -> None:
        self.train_config()
        self.loss_weights()
        self.metric()
        self.generator_config()
        self.discriminator_config()
        self.dataset()


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, dotted: str, value: Any) -> None:
    """Set ``raw[a][b] = value`` for ``dotted == "a.b"``; string values are parsed as JSON when possible."""
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-object")
    node[keys[-1]] = _coerce(value) if isinstance(value, str) else copy.deepcopy(value)
