"""Shared value types and range contracts."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch


class ContractError(ValueError):
    """An input violates a documented shape, range or value contract."""


class Range(str, enum.Enum):
    MODEL = "model_range"  # [-1, 1]
    UNIT = "unit_range"  # [0, 1]


_BOUNDS = {Range.MODEL: (-1.0, 1.0), Range.UNIT: (0.0, 1.0)}
# slack for roundoff from composition arithmetic
_RANGE_TOL = 1e-5


@dataclass(frozen=True)
class ImageBatch:
    """An ``[N, 3, H, W]`` image tensor tagged with its value range."""

    data: torch.Tensor
    range_tag: Range = Range.MODEL

    def __post_init__(self):
        x = self.data
        if not isinstance(x, torch.Tensor) or x.dim() != 4 or x.shape[1] != 3:
            raise ContractError(f"ImageBatch needs an [N, 3, H, W] tensor, got {tuple(getattr(x, 'shape', ()))}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ContractError(f"image height and width must be multiples of 4, got {tuple(x.shape[2:])}")
        lo, hi = _BOUNDS[Range(self.range_tag)]
        if x.numel():
            with torch.no_grad():
                xmin, xmax = float(x.min()), float(x.max())
            if not (xmin >= lo - _RANGE_TOL and xmax <= hi + _RANGE_TOL):
                raise ContractError(
                    f"values [{xmin:.6g}, {xmax:.6g}] outside {self.range_tag.value} [{lo}, {hi}]"
                )

    @property
    def shape(self) -> torch.Size:
        return self.data.shape

    def expect(self, tag: Range) -> torch.Tensor:
        if self.range_tag != tag:
            raise ContractError(f"expected {tag.value} image, got {self.range_tag.value}")
        return self.data


@dataclass(frozen=True)
class Mask:
    """Binary ``[N, 1, H, W]`` hole mask, 1 marks unknown pixels."""

    data: torch.Tensor

    def __post_init__(self):
        m = self.data
        if not isinstance(m, torch.Tensor) or m.dim() != 4 or m.shape[1] != 1:
            raise ContractError(f"Mask needs an [N, 1, H, W] tensor, got {tuple(getattr(m, 'shape', ()))}")
        if not torch.all((m == 0) | (m == 1)):
            raise ContractError("mask values must be exactly 0 or 1")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class LossWeights:
    lambda_: float = 25.0
    eta: float = 5.0
    mu: float = 0.003
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("lambda_", "eta", "mu", "gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0
    image_size: int = 256
    max_hole: int = 128
    local_patch: int = 128
    mask_protocol: str = "random"
    checkpoint_every: int = 0
    sample_every: int = 0
    lr_decay_every: int = 0  # 0 disables the step schedule
    lr_decay_gamma: float = 0.5
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not 0 < self.max_hole <= self.image_size:
            raise ContractError("max_hole must satisfy 0 < max_hole <= image_size")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0 < self.local_patch <= self.image_size:
            raise ContractError("local_patch must satisfy 0 < local_patch <= image_size")
        if self.mask_protocol not in ("center", "random", "irregular"):
            raise ContractError(f"unknown mask protocol {self.mask_protocol!r}")


def to_model_range(img: ImageBatch) -> ImageBatch:
    x = img.expect(Range.UNIT)
    return ImageBatch(x * 2 - 1, Range.MODEL)


def from_model_range(img: ImageBatch) -> ImageBatch:
    x = img.expect(Range.MODEL)
    return ImageBatch(((x + 1) / 2).clamp(0, 1), Range.UNIT)
