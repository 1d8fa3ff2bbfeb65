"""Hole masks, input formation, output composition and local-patch selection."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .core import ContractError, ImageBatch, Mask, Range

MASK_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class MaskLoadError(IOError):
    pass


@dataclass(frozen=True)
class HoleBox:
    top: int
    left: int
    height: int
    width: int

    def check(self, image_size: int, max_hole: int | None = None) -> "HoleBox":
        inside = (0 <= self.top and 0 <= self.left and self.top + self.height <= image_size
                  and self.left + self.width <= image_size and self.height > 0 and self.width > 0)
        if not inside:
            raise ContractError(f"{self} does not lie inside a {image_size}x{image_size} frame")
        if max_hole is not None and (self.height > max_hole or self.width > max_hole):
            raise ContractError(f"{self} exceeds max hole {max_hole}")
        return self

    @property
    def area(self) -> int:
        return self.height * self.width


def box_mask(image_size: int, box: HoleBox) -> Mask:
    m = torch.zeros(1, 1, image_size, image_size)
    m[..., box.top: box.top + box.height, box.left: box.left + box.width] = 1
    return Mask(m)


def center_mask(image_size: int, hole: int) -> tuple[Mask, HoleBox]:
    if not 0 < hole <= image_size:
        raise ContractError(f"hole {hole} must be in 1..{image_size}")
    off = (image_size - hole) // 2
    box = HoleBox(off, off, hole, hole)
    return box_mask(image_size, box), box


def random_regular_mask(image_size: int, max_hole: int, rng: np.random.Generator) -> tuple[Mask, HoleBox]:
    """Box with sides uniform on ``[max_hole // 2, max_hole]`` at a uniform valid position."""
    if not 0 < max_hole <= image_size:
        raise ContractError(f"max_hole {max_hole} must be in 1..{image_size}")
    lo = max(1, max_hole // 2)
    h, w = (int(s) for s in rng.integers(lo, max_hole + 1, size=2))
    top = int(rng.integers(0, image_size - h + 1))
    left = int(rng.integers(0, image_size - w + 1))
    box = HoleBox(top, left, h, w)
    return box_mask(image_size, box), box


def load_irregular_mask(path: str | os.PathLike, image_size: int) -> Mask:
    """Read an 8-bit mask image (white = hole), resize and binarise at 0.5."""
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
    except (OSError, UnidentifiedImageError) as e:
        raise MaskLoadError(f"cannot read mask {path}: {e}") from e
    if gray.size != (image_size, image_size):
        gray = gray.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(gray, dtype=np.float32) / 255.0
    return Mask(torch.from_numpy((arr >= 0.5).astype(np.float32))[None, None])


def list_mask_files(mask_dir: str | os.PathLike | None) -> list[Path]:
    if mask_dir is None:
        raise MaskLoadError("irregular protocol needs a mask directory (config key paths.irregular_mask_dir)")
    if not Path(mask_dir).is_dir():
        raise MaskLoadError(f"mask directory {mask_dir} does not exist")
    files = sorted(p for p in Path(mask_dir).iterdir() if p.suffix.lower() in MASK_SUFFIXES)
    if not files:
        raise MaskLoadError(f"no mask images in {mask_dir}")
    return files


def sample_irregular_mask(files: Sequence[Path], image_size: int, patch: int,
                          rng: np.random.Generator) -> tuple[Mask, HoleBox]:
    mask = load_irregular_mask(files[int(rng.integers(0, len(files)))], image_size)
    return mask, local_patch_box(mask, patch)


def local_patch_box(mask: Mask | torch.Tensor, patch: int) -> HoleBox:
    """``patch`` x ``patch`` box covering the most hole pixels.

    Exhaustive integral-image sweep; ties go to the topmost, then leftmost box.
    An empty mask yields the centre box.
    """
    m = mask.data if isinstance(mask, Mask) else mask
    m = m.reshape(m.shape[-2:]).detach().cpu().numpy().astype(np.int64)
    h, w = m.shape
    if patch > min(h, w):
        raise ContractError(f"patch {patch} larger than mask {h}x{w}")
    if not m.any():
        return HoleBox((h - patch) // 2, (w - patch) // 2, patch, patch)
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = m.cumsum(0).cumsum(1)
    cover = ii[patch:, patch:] - ii[:-patch, patch:] - ii[patch:, :-patch] + ii[:-patch, :-patch]
    # argmax returns the first maximum in row-major order: topmost, then leftmost
    top, left = np.unravel_index(int(np.argmax(cover)), cover.shape)
    return HoleBox(int(top), int(left), patch, patch)


def box_coverage(mask: Mask | torch.Tensor, box: HoleBox) -> int:
    m = mask.data if isinstance(mask, Mask) else mask
    m = m.reshape(m.shape[-2:])
    return int(m[box.top: box.top + box.height, box.left: box.left + box.width].sum())


def _check_pair(img: torch.Tensor, m: torch.Tensor):
    if img.shape[0] != m.shape[0] or img.shape[2:] != m.shape[2:]:
        raise ContractError(f"image {tuple(img.shape)} and mask {tuple(m.shape)} shapes differ")


def make_input(gt: ImageBatch, mask: Mask) -> ImageBatch:
    x = gt.expect(Range.MODEL)
    _check_pair(x, mask.data)
    return ImageBatch(x * (1 - mask.data.to(x.dtype)), Range.MODEL)


def compose_output(img_in: ImageBatch, pred: ImageBatch, mask: Mask) -> ImageBatch:
    x, p = img_in.expect(Range.MODEL), pred.expect(Range.MODEL)
    if x.shape != p.shape:
        raise ContractError(f"input {tuple(x.shape)} and prediction {tuple(p.shape)} shapes differ")
    _check_pair(x, mask.data)
    return ImageBatch(x + p * mask.data.to(p.dtype), Range.MODEL)


def crop_patches(img: torch.Tensor, boxes: Sequence[HoleBox], patch: int) -> torch.Tensor:
    """Crop one box per sample and bilinearly resize each crop to ``patch`` x ``patch``."""
    if len(boxes) != img.shape[0]:
        raise ContractError(f"{len(boxes)} boxes for a batch of {img.shape[0]}")
    out = []
    for n, b in enumerate(boxes):
        crop = img[n: n + 1, :, b.top: b.top + b.height, b.left: b.left + b.width]
        if crop.shape[-2:] != (patch, patch):
            crop = F.interpolate(crop, size=(patch, patch), mode="bilinear", align_corners=False)
        out.append(crop)
    return torch.cat(out, dim=0)
