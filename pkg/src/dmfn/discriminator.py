"""Two-branch critic: a global branch over the full frame and a local branch over the hole patch."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .core import ContractError, ImageBatch, Range
from .generator import init_weights


@dataclass(frozen=True)
class DiscriminatorConfig:
    global_layers: int = 6
    local_layers: int = 5
    base_width: int = 64
    max_width: int = 512
    tap_count: int = 5

    def __post_init__(self):
        if self.tap_count != 5:
            raise ContractError("the local branch exposes exactly 5 taps")
        if self.local_layers < self.tap_count:
            raise ContractError("local_layers must be >= tap_count")
        if self.global_layers < 1:
            raise ContractError("global_layers must be >= 1")

    def widths(self, layers: int) -> list[int]:
        return [min(self.base_width * 2 ** i, self.max_width) for i in range(layers)]


@dataclass(frozen=True)
class CriticResult:
    score: torch.Tensor  # [N], pre-sigmoid
    local_taps: tuple[torch.Tensor, ...]


def _branch(widths: list[int]) -> nn.ModuleList:
    layers, cin = [], 3
    for w in widths:
        layers.append(nn.Sequential(nn.Conv2d(cin, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
        cin = w
    return nn.ModuleList(layers)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        gw, lw = cfg.widths(cfg.global_layers), cfg.widths(cfg.local_layers)
        self.global_branch = _branch(gw)
        self.local_branch = _branch(lw)
        self.head = nn.Linear(gw[-1] + lw[-1], 1)
        # taps are the last `tap_count` local layers (all of them by default)
        self.tap_layers = tuple(range(cfg.local_layers - cfg.tap_count, cfg.local_layers))

    def min_size(self) -> tuple[int, int]:
        """Smallest (global, local) input side for which every stride-2 layer stays >= 1 pixel."""
        return 2 ** self.cfg.global_layers, 2 ** self.cfg.local_layers

    def tap_sizes(self, patch: int) -> list[int]:
        return [patch >> (i + 1) for i in self.tap_layers]

    def forward(self, full: torch.Tensor, patch: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if full.shape[0] != patch.shape[0]:
            raise ContractError(f"batch sizes differ: full {full.shape[0]} vs patch {patch.shape[0]}")
        g_min, l_min = self.min_size()
        if min(full.shape[-2:]) < g_min or min(patch.shape[-2:]) < l_min:
            raise ContractError(f"global input needs side >= {g_min}, local patch >= {l_min}")
        g = full
        for layer in self.global_branch:
            g = layer(g)
        h, taps = patch, []
        for i, layer in enumerate(self.local_branch):
            h = layer(h)
            if i in self.tap_layers:
                taps.append(h)
        feats = torch.cat([g.mean(dim=(2, 3)), h.mean(dim=(2, 3))], dim=1)
        return self.head(feats).squeeze(1), taps


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> Discriminator:
    return init_weights(Discriminator(cfg))


def discriminator_forward(d: Discriminator, full_img: ImageBatch, local_patch: ImageBatch) -> CriticResult:
    score, taps = d(full_img.expect(Range.MODEL), local_patch.expect(Range.MODEL))
    return CriticResult(score, tuple(taps))
