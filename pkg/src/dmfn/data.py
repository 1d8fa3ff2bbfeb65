"""Image ingestion with per-dataset crop/scale policies and seeded batching.

Every emitted batch is a pure function of ``(seed, epoch, batch index)``,
which makes resuming at an arbitrary iteration exact without replaying the
skipped batches.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .core import ContractError, ImageBatch, Mask, Range, TrainConfig
from .masking import HoleBox, center_mask, list_mask_files, random_regular_mask, sample_irregular_mask

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
POLICIES = ("paris_streetview", "places2", "face_1024", "generic")
# square crop side taken before scaling to the target size
CROP_SIDE = {"paris_streetview": 537, "places2": 512}


class DataError(IOError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    policy: str = "generic"
    split: str = "train"
    target_size: int = 256

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ContractError(f"unknown dataset policy {self.policy!r}")
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"unknown split {self.split!r}")
        if self.target_size % 4:
            raise ContractError("target_size must be a multiple of 4")

    def directory(self) -> Path:
        root = Path(self.root)
        sub = root / self.split
        return sub if sub.is_dir() else root

    def files(self) -> list[Path]:
        d = self.directory()
        if not d.is_dir():
            raise DataError(f"dataset directory {d} does not exist")
        files = sorted((p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=lambda p: p.name)
        if not files:
            raise DataError(f"no PNG/JPEG images in {d}")
        return files


@dataclass(frozen=True)
class Batch:
    gt: ImageBatch
    mask: Mask
    boxes: tuple[HoleBox, ...]
    ids: tuple[str, ...] = ()


def resize(img: Image.Image, size: tuple[int, int]) -> Image.Image:
    """Area averaging when shrinking, bilinear when enlarging."""
    if img.size == size:
        return img
    shrinking = size[0] <= img.size[0] and size[1] <= img.size[1]
    return img.resize(size, Image.BOX if shrinking else Image.BILINEAR)


def _ensure_min_side(img: Image.Image, side: int) -> Image.Image:
    w, h = img.size
    if min(w, h) >= side:
        return img
    log.warning("image %dx%d smaller than crop %d; enlarging before cropping", w, h, side)
    s = side / min(w, h)
    return resize(img, (max(side, round(w * s)), max(side, round(h * s))))


def _random_crop(img: Image.Image, side: int, rng: np.random.Generator) -> Image.Image:
    w, h = img.size
    left = int(rng.integers(0, w - side + 1))
    top = int(rng.integers(0, h - side + 1))
    return img.crop((left, top, left + side, top + side))


def prepare_sample(raw: Image.Image, policy: str, rng: np.random.Generator, target_size: int = 256) -> ImageBatch:
    """Crop/scale one RGB image per ``policy``; returns a ``[1, 3, S, S]`` model-range batch."""
    if policy not in POLICIES:
        raise ContractError(f"unknown dataset policy {policy!r}")
    img = raw.convert("RGB")
    if policy in CROP_SIDE:
        side = CROP_SIDE[policy]
        img = _random_crop(_ensure_min_side(img, side), side, rng)
    elif policy == "generic":
        w, h = img.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        img = img.crop((left, top, left + side, top + side))
    img = resize(img, (target_size, target_size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    t = torch.from_numpy(arr.transpose(2, 0, 1).copy())[None]
    return ImageBatch(t * 2 - 1, Range.MODEL)


def decode(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode {path}: {e}") from e


def sample_mask(protocol: str, cfg: TrainConfig, rng: np.random.Generator,
                mask_files: Sequence[Path] | None = None) -> tuple[Mask, HoleBox]:
    if protocol == "center":
        return center_mask(cfg.image_size, cfg.max_hole)
    if protocol == "random":
        return random_regular_mask(cfg.image_size, cfg.max_hole, rng)
    if protocol == "irregular":
        if not mask_files:
            raise DataError("irregular protocol needs mask files (config key irregular_mask_dir)")
        return sample_irregular_mask(mask_files, cfg.image_size, cfg.local_patch, rng)
    raise ContractError(f"unknown mask protocol {protocol!r}")


def _item(path: Path, policy: str, size: int, seed: int, epoch: int, index: int) -> torch.Tensor:
    rng = np.random.default_rng([seed, epoch, index, 0])
    return prepare_sample(decode(path), policy, rng, size).data


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xE90C]).permutation(n)


def batch_iterator(spec: DatasetSpec, cfg: TrainConfig, start_iteration: int = 0, *,
                   shuffle: bool = True, epochs: int | None = None,
                   mask_dir: str | os.PathLike | None = None, protocol: str | None = None,
                   workers: int = 0) -> Iterator[Batch]:
    """Yield batches forever (or for ``epochs`` epochs), starting at ``start_iteration``.

    The last batch of an epoch may be short.  ``workers`` threads decode in
    parallel; emission order does not depend on the worker count.
    """
    if spec.target_size != cfg.image_size:
        raise ContractError(f"dataset target_size {spec.target_size} != image_size {cfg.image_size}")
    files = spec.files()
    protocol = protocol or cfg.mask_protocol
    mask_files = list_mask_files(mask_dir) if protocol == "irregular" else None
    n, bs = len(files), cfg.batch_size
    per_epoch = -(-n // bs)
    it = start_iteration
    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        while epochs is None or it < epochs * per_epoch:
            epoch, b = divmod(it, per_epoch)
            order = epoch_order(n, cfg.seed, epoch) if shuffle else np.arange(n)
            idx = [int(i) for i in order[b * bs: (b + 1) * bs]]
            args = [(files[i], spec.policy, spec.target_size, cfg.seed, epoch, i) for i in idx]
            imgs = list(pool.map(lambda a: _item(*a), args)) if pool else [_item(*a) for a in args]
            mrng = np.random.default_rng([cfg.seed, epoch, b, 1])
            masks, boxes = zip(*(sample_mask(protocol, cfg, mrng, mask_files) for _ in idx))
            yield Batch(ImageBatch(torch.cat(imgs), Range.MODEL), Mask(torch.cat([m.data for m in masks])),
                        tuple(boxes), tuple(files[i].name for i in idx))
            it += 1
    finally:
        if pool:
            pool.shutdown(wait=False)
