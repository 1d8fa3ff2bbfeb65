"""Dense multi-scale fusion generator.

The network maps ``[I_in, M]`` (4 channels) to a full-frame RGB prediction:

    encoder (1x, 1/2, 1/4) -> num_dmfb x DMFB -> two 4x4 transposed convs -> 3x3 conv + tanh

Each DMFB reduces its input to ``branch_channels``, runs four parallel
dilated 3x3 convolutions, merges them with cumulative sums (each sum passed
through a 3x3 convolution ``K_i``), concatenates, fuses with a 1x1
convolution and adds the block input back.
"""

from __future__ import annotations

import contextlib
import copy
import re
from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn as nn

from .core import ContractError, ImageBatch, Mask, Range

IN_EPS = 1e-5


@dataclass(frozen=True)
class DMFBConfig:
    in_channels: int = 256
    branch_channels: int = 64
    dilations: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        d = tuple(self.dilations)
        object.__setattr__(self, "dilations", d)
        if len(d) != 4:
            raise ContractError("DMFB needs exactly four dilation rates")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ContractError(f"dilation rates must be strictly increasing, got {d}")
        if self.in_channels < 1 or self.branch_channels < 1:
            raise ContractError("channel counts must be positive")


@dataclass(frozen=True)
class AblationVariant:
    """Middle-part wiring of a DMFB.

    ``kind`` is one of ``full_dmfb``, ``rate_k``, ``no_combination``, ``no_Ki``.
    ``wide`` only applies to ``rate_k``: the four-way fan-out of the reduced
    features (4 x 64 = 256 channels) feeds a 256 -> 256 dilated convolution
    instead of a 64 -> 256 one.
    """

    kind: str = "full_dmfb"
    rate: int | None = None
    wide: bool = False

    KINDS = ("full_dmfb", "rate_k", "no_combination", "no_Ki")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ContractError(f"unknown ablation variant {self.kind!r}")
        if self.kind == "rate_k" and (self.rate is None or self.rate < 1):
            raise ContractError("rate_k needs a positive dilation rate")

    @classmethod
    def parse(cls, text: str, wide: bool = False) -> "AblationVariant":
        """Accepts ``full_dmfb``, ``dmfb``, ``no_Ki``, ``no_combination``, ``rate=2``, ``rate_8``."""
        t = text.strip()
        m = re.fullmatch(r"rate[_=]?(\d+)", t)
        if m:
            return cls("rate_k", int(m.group(1)), wide)
        aliases = {"dmfb": "full_dmfb", "full": "full_dmfb", "no_ki": "no_Ki", "w/o_ki": "no_Ki",
                   "w/o_combination": "no_combination"}
        return cls(aliases.get(t.lower(), t))

    @property
    def label(self) -> str:
        if self.kind == "rate_k":
            return f"rate={self.rate}" + (" (wide)" if self.wide else "")
        return self.kind


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 4
    base_width: int = 64
    bottleneck_channels: int = 256
    num_dmfb: int = 8
    dmfb: DMFBConfig = field(default_factory=DMFBConfig)
    variant: AblationVariant = field(default_factory=AblationVariant)

    def __post_init__(self):
        if self.input_channels != 4:
            raise ContractError("generator input is RGB + mask (4 channels)")
        if self.bottleneck_channels != self.dmfb.in_channels:
            raise ContractError("bottleneck_channels must equal dmfb.in_channels")
        if self.num_dmfb < 1:
            raise ContractError("num_dmfb must be >= 1")
        if self.bottleneck_channels != 4 * self.base_width:
            raise ContractError("two stride-2 stages double base_width twice: bottleneck must be 4 * base_width")


def _conv_in_relu(cin: int, cout: int, k: int = 3, dilation: int = 1, affine: bool = False) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=dilation * (k // 2), dilation=dilation),
        nn.InstanceNorm2d(cout, eps=IN_EPS, affine=affine),
        nn.ReLU(inplace=False),
    )


class DMFB(nn.Module):
    def __init__(self, cfg: DMFBConfig = DMFBConfig(), variant: AblationVariant = AblationVariant()):
        super().__init__()
        self.cfg = cfg
        self.variant = variant
        c, b = cfg.in_channels, cfg.branch_channels
        self.reduce = _conv_in_relu(c, b)
        if variant.kind == "rate_k":
            mid_in = 4 * b if variant.wide else b
            self.middle = _conv_in_relu(mid_in, 4 * b, dilation=variant.rate)
        else:
            self.branches = nn.ModuleList(_conv_in_relu(b, b, dilation=d) for d in cfg.dilations)
            if variant.kind == "full_dmfb":
                self.combine = nn.ModuleList(_conv_in_relu(b, b) for _ in cfg.dilations[1:])
            self.concat_norm = nn.Sequential(nn.InstanceNorm2d(4 * b, eps=IN_EPS), nn.ReLU(inplace=False))
        self.fuse = nn.Sequential(nn.Conv2d(4 * b, c, 1), nn.InstanceNorm2d(c, eps=IN_EPS))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"DMFB expects {self.cfg.in_channels} input channels, got {tuple(x.shape)}")
        r = self.reduce(x)
        kind = self.variant.kind
        if kind == "rate_k":
            h = self.middle(r.repeat(1, 4, 1, 1) if self.variant.wide else r)
        else:
            xs = [branch(r) for branch in self.branches]
            if kind == "no_combination":
                ys = xs
            else:
                ys = [xs[0]]
                for i in range(1, 4):
                    # y_2 sums x_1 + x_2; later terms chain on y_{i-1}
                    s = (xs[0] if i == 1 else ys[-1]) + xs[i]
                    ys.append(self.combine[i - 1](s) if kind == "full_dmfb" else s)
            h = self.concat_norm(torch.cat(ys, dim=1))
        return x + self.fuse(h)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.encoder = nn.Sequential(
            nn.Conv2d(cfg.input_channels, w, 5, padding=2),
            nn.InstanceNorm2d(w, eps=IN_EPS, affine=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, eps=IN_EPS, affine=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w, eps=IN_EPS, affine=True),
            nn.ReLU(inplace=False),
        )
        self.blocks = nn.Sequential(*(DMFB(cfg.dmfb, cfg.variant) for _ in range(cfg.num_dmfb)))
        self.upsampler = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w, eps=IN_EPS, affine=True),
            nn.ReLU(inplace=False),
            nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1),
            nn.InstanceNorm2d(w, eps=IN_EPS, affine=True),
            nn.ReLU(inplace=False),
        )
        self.head = nn.Sequential(nn.Conv2d(w, 3, 3, padding=1), nn.Tanh())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ContractError("generator input height and width must be multiples of 4")
        return self.head(self.upsampler(self.blocks(self.encoder(x))))


def init_weights(module: nn.Module) -> nn.Module:
    """Orthogonal conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def build_dmfb(cfg: DMFBConfig = DMFBConfig(), variant: AblationVariant = AblationVariant()) -> DMFB:
    return init_weights(DMFB(cfg, variant))


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> Generator:
    return init_weights(Generator(cfg))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def generator_forward(gen: Generator, img_in: ImageBatch, mask: Mask) -> ImageBatch:
    x = img_in.expect(Range.MODEL)
    if x.shape[0] != mask.shape[0] or x.shape[2:] != mask.shape[2:]:
        raise ContractError(f"image {tuple(x.shape)} and mask {tuple(mask.shape)} sizes differ")
    pred = gen(torch.cat([x, mask.data.to(x.dtype)], dim=1))
    return ImageBatch(pred, Range.MODEL)


def _instance_norm_frozen_stats(self: nn.InstanceNorm2d, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    y = (x - mean) / torch.sqrt(var + self.eps)
    if self.affine:
        y = y * self.weight[None, :, None, None] + self.bias[None, :, None, None]
    return y


@contextlib.contextmanager
def frozen_norm_statistics(module: nn.Module) -> Iterator[nn.Module]:
    """Treat instance-norm mean/variance as constants in backprop.

    Instance norm couples every spatial position through its statistics, so
    input-gradient footprints are only meaningful with the statistics frozen.
    """
    norms = [m for m in module.modules() if isinstance(m, nn.InstanceNorm2d)]
    for m in norms:
        m.forward = _instance_norm_frozen_stats.__get__(m)
    try:
        yield module
    finally:
        for m in norms:
            del m.forward


def gradient_footprint(block: nn.Module, channels: int, size: int = 48, seed: int = 0) -> tuple[int, int]:
    """Height and width of the input region that influences the centre output pixel.

    Measured as the bounding box of nonzero input gradients of the centre
    output (summed over channels), with instance-norm statistics frozen.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, channels, size, size, generator=g, dtype=torch.float64, requires_grad=True)
    block = copy.deepcopy(block).double()
    with frozen_norm_statistics(block):
        y = block(x)
        c = size // 2
        grad, = torch.autograd.grad(y[0, :, c, c].sum(), x)
    support = grad.abs().sum(dim=(0, 1)) > 0
    rows = torch.nonzero(support.any(dim=1)).flatten()
    cols = torch.nonzero(support.any(dim=0)).flatten()
    if rows.numel() == 0:
        return 0, 0
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)

