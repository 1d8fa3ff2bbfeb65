"""PSNR / SSIM / LPIPS evaluation and comparison-grid output."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, PngImagePlugin

from .core import ContractError, ImageBatch, Mask, Range, TrainConfig, from_model_range
from .data import DatasetSpec, batch_iterator
from .generator import Generator, generator_forward
from .masking import compose_output, make_input

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _unit(x) -> torch.Tensor:
    return x.expect(Range.UNIT) if isinstance(x, ImageBatch) else x


def psnr(a, b, region: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample PSNR in dB with peak 1. Returns ``(values, infinite)``.

    Zero-error samples are reported as ``PSNR_CAP`` with ``infinite`` set.
    ``region`` (``[N, 1, H, W]``, 1 = counted) restricts the MSE to those pixels.
    """
    a, b = _unit(a), _unit(b)
    _pair(a, b)
    sq = (a.double() - b.double()) ** 2
    if region is None:
        mse = sq.flatten(1).mean(dim=1)
    else:
        w = region.double().expand_as(sq)
        mse = (sq * w).flatten(1).sum(dim=1) / w.flatten(1).sum(dim=1).clamp_min(1)
    infinite = mse == 0
    val = 10 * torch.log10(1.0 / mse.clamp_min(1e-300))
    return torch.where(infinite, torch.full_like(val, PSNR_CAP), val), infinite


def _gaussian_window(dtype) -> torch.Tensor:
    r = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(r ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """SSIM over valid 11x11 Gaussian windows, ``[N, C, H-10, W-10]``."""
    _pair(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ContractError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    a, b = a.double(), b.double()
    c = a.shape[1]
    win = _gaussian_window(a.dtype).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, region: torch.Tensor | None = None) -> torch.Tensor:
    """Per-sample mean SSIM (L = 1). ``region`` keeps windows whose centre pixel is marked."""
    a, b = _unit(a), _unit(b)
    m = ssim_map(a, b)
    if region is None:
        return m.flatten(1).mean(dim=1)
    p = SSIM_WINDOW // 2
    w = region[..., p:-p, p:-p].double().expand_as(m)
    return (m * w).flatten(1).sum(dim=1) / w.flatten(1).sum(dim=1).clamp_min(1)


class LPIPSAdapter:
    """Wraps an external LPIPS implementation; ``available`` is False when none could be built.

    ``backend`` may be any callable taking two model-range ``[N, 3, H, W]``
    tensors and returning per-sample distances.
    """

    def __init__(self, backend: Callable | None = None, name: str = "custom"):
        self.backend, self.name = backend, name

    @property
    def available(self) -> bool:
        return self.backend is not None

    @classmethod
    def from_package(cls, net: str = "alex", allow_random_backbone: bool = False) -> "LPIPSAdapter":
        """Build from the ``lpips`` package; absent (with a warning) if it or its backbone is unavailable."""
        try:
            import lpips
        except ImportError:
            warnings.warn("lpips package not installed; LPIPS will be reported as absent")
            return cls(None, "absent")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model = lpips.LPIPS(net=net, pnet_rand=allow_random_backbone, verbose=False).eval()
        except Exception as e:  # backbone download failures surface as assorted errors
            warnings.warn(f"LPIPS backend unavailable ({e.__class__.__name__}: {e}); reporting absent")
            return cls(None, "absent")
        model.requires_grad_(False)

        def run(a, b):
            with torch.no_grad():
                return model(a.float(), b.float()).flatten()

        return cls(run, f"lpips-{net}" + ("-randbackbone" if allow_random_backbone else ""))

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> list[float | None]:
        if not self.available:
            return [None] * a.shape[0]
        try:
            return [float(v) for v in self.backend(a, b)]
        except Exception as e:
            warnings.warn(f"LPIPS backend failed ({e}); reporting absent")
            return [None] * a.shape[0]


@dataclass
class EvalRow:
    id: str
    psnr: float
    psnr_infinite: bool
    ssim: float
    lpips: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config_hash: str = ""
    protocol: str = "center"
    region: str = "full"

    def means(self) -> dict[str, float | None]:
        if not self.rows:
            return {"psnr": None, "ssim": None, "lpips": None}
        lp = [r.lpips for r in self.rows]
        return {
            "psnr": math.fsum(r.psnr for r in self.rows) / len(self.rows),
            "ssim": math.fsum(r.ssim for r in self.rows) / len(self.rows),
            "lpips": None if any(v is None for v in lp) else math.fsum(lp) / len(lp),
        }

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with csv_path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "psnr", "psnr_infinite", "ssim", "lpips"])
            for r in self.rows:
                w.writerow([r.id, f"{r.psnr:.6f}", int(r.psnr_infinite), f"{r.ssim:.6f}",
                            "absent" if r.lpips is None else f"{r.lpips:.6f}"])
        summary = {"config_hash": self.config_hash, "protocol": self.protocol, "region": self.region,
                   "count": len(self.rows), "means": self.means(),
                   "lpips": "absent" if any(r.lpips is None for r in self.rows) else "present"}
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


# A predictor maps (I_in, M, I_gt) model-range tensors to I_pred. Generators ignore I_gt;
# the oracle and copy-input baselines use it or I_in directly.
Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def generator_predictor(gen: Generator) -> Predictor:
    gen.eval()

    def predict(img_in, mask, gt):
        with torch.no_grad():
            return generator_forward(gen, ImageBatch(img_in), Mask(mask)).data

    return predict


def oracle_predictor(img_in, mask, gt):
    return gt


def copy_input_predictor(img_in, mask, gt):
    return img_in


def evaluate_dataset(model: Predictor | Generator, spec: DatasetSpec, cfg: TrainConfig, protocol: str = "center",
                     *, mask_dir=None, lpips: LPIPSAdapter | None = None, region: str = "full",
                     config_hash: str = "", grid_path: str | Path | None = None, grid_rows: int = 4) -> EvalReport:
    """Inpaint every image of ``spec`` (in file order) under ``protocol`` and score the composites."""
    if region not in ("full", "hole"):
        raise ContractError(f"region must be 'full' or 'hole', got {region!r}")
    predict = generator_predictor(model) if isinstance(model, Generator) else model
    lpips = lpips or LPIPSAdapter(None, "absent")
    report = EvalReport(config_hash=config_hash, protocol=protocol, region=region)
    grid = []
    for batch in batch_iterator(spec, cfg, shuffle=False, epochs=1, mask_dir=mask_dir, protocol=protocol):
        img_in = make_input(batch.gt, batch.mask)
        pred = ImageBatch(predict(img_in.data, batch.mask.data, batch.gt.data).clamp(-1, 1))
        out = compose_output(img_in, pred, batch.mask)
        known = batch.mask.data == 0
        if not torch.equal(out.data.masked_select(known.expand_as(out.data)),
                           img_in.data.masked_select(known.expand_as(img_in.data))):
            raise AssertionError("composition altered known pixels")
        a, b = from_model_range(out), from_model_range(batch.gt)
        reg = batch.mask.data if region == "hole" else None
        p, inf = psnr(a, b, reg)
        s = ssim(a, b, reg)
        lp = lpips(out.data, batch.gt.data)
        for n, name in enumerate(batch.ids):
            report.rows.append(EvalRow(name, float(p[n]), bool(inf[n]), float(s[n]), lp[n]))
            if len(grid) < grid_rows:
                grid.append(((img_in.data[n] + 1) / 2, a.data[n], b.data[n]))
    if not report.rows:
        raise ContractError("evaluation split is empty")
    if grid_path:
        emit_grid([tuple(t.clamp(0, 1) for t in row) for row in grid], grid_path, config_hash)
    return report


def quantize(img: torch.Tensor) -> np.ndarray:
    """Unit-range ``[3, H, W]`` tensor to ``uint8 [H, W, 3]`` via round(255 v)."""
    arr = torch.round(img.detach().double().clamp(0, 1) * 255).to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def _png_info(config_hash: str) -> PngImagePlugin.PngInfo:
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text("dmfn_config_hash", config_hash)
    return info


def emit_grid(rows: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor]], path: str | Path,
              config_hash: str = "") -> Path:
    """Rows of (input, output, gt) unit-range images laid out left to right, stacked top to bottom."""
    if not rows:
        raise ContractError("emit_grid needs at least one row")
    strips = [np.concatenate([quantize(t) for t in row], axis=1) for row in rows]
    grid = np.concatenate(strips, axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid, "RGB").save(path, pnginfo=_png_info(config_hash))
    return path
