"""Frozen VGG19 feature pyramid (relu1_1 ... relu5_1).

Weights come from a tensor manifest (see ``serialization``) whose names follow
torchvision's ``features.<idx>.weight`` / ``features.<idx>.bias`` scheme.
``scripts/fetch_vgg19.py`` converts the public torchvision release.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

from .core import ContractError, ImageBatch, Range
from .serialization import ManifestError, file_sha256, load_manifest, save_manifest, state_checksum

log = logging.getLogger(__name__)

# torchvision vgg19 "features" layout up to relu5_1; "M" is a 2x2 max-pool
_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512]
TAP_INDICES = (1, 6, 11, 20, 29)  # relu1_1, relu2_1, relu3_1, relu4_1, relu5_1
TAP_NAMES = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")
CHANNELS = (64, 128, 256, 512, 512)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ENV_WEIGHTS = "DMFN_VGG_WEIGHTS"


class VGGWeightsError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def validate(self) -> "FeaturePyramid":
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[-2] != a.shape[-2] // 2 or b.shape[-1] != a.shape[-1] // 2:
                raise ContractError("pyramid levels must halve spatially")
        return self


def _features() -> nn.Sequential:
    layers, cin = [], 3
    for v in _LAYOUT:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=False)]
            cin = v
    return nn.Sequential(*layers)


class VGG19Features(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = _features()
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always inference mode; there is nothing mode-dependent anyway
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x`` is a model-range tensor; returns the five relu*_1 activations."""
        h = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = []
        last = TAP_INDICES[-1]
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in TAP_INDICES:
                taps.append(h)
            if i == last:
                break
        return taps

    def weight_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if k.startswith("features.")}

    def checksum(self) -> str:
        return state_checksum(self.weight_tensors())


def resolve_weights_path(path: str | os.PathLike | None) -> Path:
    env = os.environ.get(ENV_WEIGHTS)
    chosen = env or path
    if not chosen:
        raise VGGWeightsError(
            "no VGG19 weights configured: set config key 'vgg_weights' or the "
            f"{ENV_WEIGHTS} environment variable (convert the torchvision release with scripts/fetch_vgg19.py)"
        )
    return Path(chosen)


def load_vgg19(path: str | os.PathLike | None, sha256: str | None = None) -> VGG19Features:
    p = resolve_weights_path(path)
    if not p.is_file():
        raise VGGWeightsError(
            f"VGG19 weights file not found: {p}. Run `python scripts/fetch_vgg19.py --out {p}` "
            "on a machine with torchvision model access, or point vgg_weights at an existing manifest."
        )
    if sha256 and file_sha256(p) != sha256:
        raise ManifestError(f"VGG19 weights {p} do not match the configured SHA-256 {sha256}")
    tensors, meta = load_manifest(p)
    net = VGG19Features()
    own = net.features.state_dict()
    for name, target in own.items():
        key = "features." + name
        if key not in tensors:
            raise ManifestError(f"{p}: missing VGG19 tensor {key!r}")
        if tuple(tensors[key].shape) != tuple(target.shape):
            raise ManifestError(f"{p}: shape mismatch for {key!r}")
    with torch.no_grad():
        for name, target in own.items():
            target.copy_(tensors["features." + name])
    if meta.get("synthetic"):
        log.warning("VGG19 weights at %s are synthetic (random init); perceptual losses are not pretrained", p)
    return net


def write_synthetic_vgg19(path: str | os.PathLike, seed: int = 0) -> str:
    """Write seeded random VGG19 weights (Kaiming fan-out, zero bias) in manifest form.

    For exercising the pipeline where the pretrained release is unavailable.
    """
    g = torch.Generator().manual_seed(seed)
    net = VGG19Features()
    with torch.no_grad():
        for m in net.features:
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=g)
                m.bias.zero_()
    return save_manifest(path, net.weight_tensors(), {"source": "synthetic", "synthetic": True, "seed": seed})


def extract_pyramid(vgg: VGG19Features, img: ImageBatch) -> FeaturePyramid:
    return FeaturePyramid(tuple(vgg(img.expect(Range.MODEL)))).validate()


def average_feature_map(pyr: Sequence[torch.Tensor], level: int) -> torch.Tensor:
    """Channel-mean of pyramid level ``level`` (1-based), shape ``[N, 1, H, W]``."""
    if not 1 <= level <= len(pyr):
        raise ContractError(f"level must be in 1..{len(pyr)}, got {level}")
    return pyr[level - 1].mean(dim=1, keepdim=True)
