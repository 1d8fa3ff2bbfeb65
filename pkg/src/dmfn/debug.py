"""Grayscale dumps of guidance maps and channel-averaged VGG features."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .losses import DistanceMetric, build_guidance
from .vgg import TAP_NAMES, VGG19Features, average_feature_map


def to_gray8(m: torch.Tensor, scale: bool) -> tuple[np.ndarray, float, float]:
    """``[H, W]`` map to uint8. Guidance maps (already in [0, 1]) are not rescaled."""
    m = m.detach().double()
    lo, hi = float(m.min()), float(m.max())
    if scale:
        m = (m - lo) / (hi - lo) if hi > lo else torch.zeros_like(m)
    return torch.round(m.clamp(0, 1) * 255).to(torch.uint8).cpu().numpy(), lo, hi


def emit_debug_maps(out: torch.Tensor, gt: torch.Tensor, vgg: VGG19Features, out_dir: str | Path,
                    metric: DistanceMetric = DistanceMetric(), config_hash: str = "") -> dict:
    """Write guidance maps (levels 1-2) and average feature maps for sample 0 plus a ``maps.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {"config_hash": config_hash, "maps": {}}
    guide = build_guidance(out[:1], gt[:1], metric)
    for l, g in enumerate(guide, start=1):
        arr, lo, hi = to_gray8(g[0, 0], scale=False)
        name = f"guidance_l{l}.png"
        Image.fromarray(arr, "L").save(out_dir / name)
        sidecar["maps"][name] = {"min": lo, "max": hi, "size": list(arr.shape)}
    with torch.no_grad():
        pyramids = {"out": vgg(out[:1]), "gt": vgg(gt[:1])}
    for tag, pyr in pyramids.items():
        for l in range(1, len(pyr) + 1):
            arr, lo, hi = to_gray8(average_feature_map(pyr, l)[0, 0], scale=True)
            name = f"avgfeat_{tag}_{TAP_NAMES[l - 1]}.png"
            Image.fromarray(arr, "L").save(out_dir / name)
            sidecar["maps"][name] = {"min": lo, "max": hi, "size": list(arr.shape)}
    (out_dir / "maps.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return sidecar
