"""Training objectives for the inpainting generator and the critic.

Feature-space losses take sequences of ``[N, C, H, W]`` tensors (a
``FeaturePyramid`` or a list of discriminator taps).  Each level is weighted
by ``1e3 / C**2`` and normalised by its element count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .core import ContractError, LossWeights

GUIDE_EPS = 1e-8
MASS_EPS = 1e-12


@dataclass(frozen=True)
class DistanceMetric:
    kind: str = "l2"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("l2", "gaussian", "dot_product"):
            raise ContractError(f"unknown distance metric {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ContractError("gaussian sigma must be > 0")


@dataclass(frozen=True)
class GuidancePyramid:
    levels: tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def level_weight(t: torch.Tensor) -> float:
    return 1e3 / t.shape[1] ** 2


def error_map(out: torch.Tensor, gt: torch.Tensor, metric: DistanceMetric = DistanceMetric()) -> torch.Tensor:
    """Per-pixel discrepancy ``[N, 1, H, W]`` between two RGB batches."""
    _same_shape(out, gt, "error_map")
    if metric.kind == "l2":
        return ((out - gt) ** 2).mean(dim=1, keepdim=True)
    if metric.kind == "gaussian":
        sq = ((out - gt) ** 2).sum(dim=1, keepdim=True)
        return torch.exp(-sq / (2 * metric.sigma ** 2))
    return (out * gt).sum(dim=1, keepdim=True)


def normalize_guidance(err: torch.Tensor) -> torch.Tensor:
    """Per-sample min-max scaling to [0, 1]; a constant map becomes all zeros."""
    flat = err.flatten(1)
    lo = flat.min(dim=1).values.view(-1, *([1] * (err.dim() - 1)))
    hi = flat.max(dim=1).values.view(-1, *([1] * (err.dim() - 1)))
    return ((err - lo) / (hi - lo + GUIDE_EPS)).clamp(0, 1)


def guidance_pyramid(g1: torch.Tensor, levels: int = 2) -> GuidancePyramid:
    if g1.shape[-2] % 2 or g1.shape[-1] % 2:
        raise ContractError(f"guidance map needs even height and width, got {tuple(g1.shape[-2:])}")
    out = [g1]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], kernel_size=2, stride=2))
    return GuidancePyramid(tuple(out))


def build_guidance(out: torch.Tensor, gt: torch.Tensor, metric: DistanceMetric = DistanceMetric()) -> GuidancePyramid:
    """Guidance pyramid for the self-guided loss, detached from the graph."""
    with torch.no_grad():
        return guidance_pyramid(normalize_guidance(error_map(out, gt, metric)))


def self_guided_loss(out_pyr: Sequence[torch.Tensor], gt_pyr: Sequence[torch.Tensor],
                     guide: Sequence[torch.Tensor]) -> torch.Tensor:
    total = 0.0
    for l, m in enumerate(guide):
        o, g = out_pyr[l], gt_pyr[l]
        _same_shape(o, g, f"self_guided level {l + 1}")
        if m.shape[-2:] != g.shape[-2:]:
            raise ContractError(f"guidance level {l + 1} is {tuple(m.shape[-2:])}, features {tuple(g.shape[-2:])}")
        total = total + level_weight(g) * (m * (g - o)).abs().sum() / g.numel()
    return total


def feature_matching_loss(out_feats: Sequence[torch.Tensor], gt_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(out_feats) != len(gt_feats):
        raise ContractError("feature lists differ in length")
    total = 0.0
    for l, (o, g) in enumerate(zip(out_feats, gt_feats)):
        _same_shape(o, g, f"feature level {l + 1}")
        total = total + level_weight(g) * (g - o).abs().sum() / g.numel()
    return total


def vgg_fm_loss(out_pyr: Sequence[torch.Tensor], gt_pyr: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(gt_pyr) != 5:
        raise ContractError(f"VGG pyramids have 5 levels, got {len(gt_pyr)}")
    return feature_matching_loss(out_pyr, gt_pyr)


def dis_fm_loss(out_taps: Sequence[torch.Tensor], gt_taps: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(out_taps) != 5 or len(gt_taps) != 5:
        raise ContractError(f"discriminator feature matching needs 5 taps, got {len(out_taps)} and {len(gt_taps)}")
    return feature_matching_loss(out_taps, [t.detach() for t in gt_taps])


def feature_centers(resp: torch.Tensor) -> torch.Tensor:
    """Spatial mass centres ``[N, K, 2]`` (row, column) of non-negative responses.

    Channels with (near) zero total mass get the image centre.
    """
    if resp.dim() != 4:
        raise ContractError("responses must be [N, K, H, W]")
    if bool((resp < 0).any()):
        raise ContractError("feature responses must be non-negative")
    n, k, h, w = resp.shape
    u = torch.arange(h, dtype=resp.dtype, device=resp.device)
    v = torch.arange(w, dtype=resp.dtype, device=resp.device)
    mass = resp.sum(dim=(2, 3))
    ok = mass > MASS_EPS
    safe = torch.where(ok, mass, torch.ones_like(mass))
    prob = resp / safe[..., None, None]  # per-channel spatial distribution; a lone impulse becomes exactly 1
    cu = (prob.sum(dim=3) * u).sum(dim=2)
    cv = (prob.sum(dim=2) * v).sum(dim=2)
    cu = torch.where(ok, cu, torch.full_like(cu, (h - 1) / 2))
    cv = torch.where(ok, cv, torch.full_like(cv, (w - 1) / 2))
    return torch.stack([cu, cv], dim=-1)


def alignment_loss(out_resp: torch.Tensor, gt_resp: torch.Tensor) -> torch.Tensor:
    """Sum over channels of squared centre distances, averaged over the batch."""
    _same_shape(out_resp, gt_resp, "alignment_loss")
    d = feature_centers(out_resp) - feature_centers(gt_resp.detach())
    return (d ** 2).sum(dim=(1, 2)).mean()


def _check_scores(real: torch.Tensor, fake: torch.Tensor):
    if real.numel() == 0 or fake.numel() == 0:
        raise ContractError("relativistic loss needs non-empty score batches")


def ragan_g_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    _check_scores(scores_real, scores_fake)
    real_rel = scores_real - scores_fake.mean()
    fake_rel = scores_fake - scores_real.mean()
    # log(1 - sigmoid(z)) == logsigmoid(-z)
    return -F.logsigmoid(-real_rel).mean() - F.logsigmoid(fake_rel).mean()


def ragan_d_loss(scores_real: torch.Tensor, scores_fake: torch.Tensor) -> torch.Tensor:
    _check_scores(scores_real, scores_fake)
    real_rel = scores_real - scores_fake.mean()
    fake_rel = scores_fake - scores_real.mean()
    return -F.logsigmoid(real_rel).mean() - F.logsigmoid(-fake_rel).mean()


def mae_loss(out: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _same_shape(out, gt, "mae_loss")
    return (out - gt).abs().mean()


TERMS = ("mae", "self_guided", "fm_vgg", "fm_dis", "adv", "align")


def total_g_loss(parts: dict, w: LossWeights = LossWeights()):
    return (parts["mae"] + w.lambda_ * (parts["self_guided"] + parts["fm_vgg"]) + w.eta * parts["fm_dis"]
            + w.mu * parts["adv"] + w.gamma * parts["align"])
