"""Adversarial training: one critic update then one generator update per iteration."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import torch

from .core import LossWeights, TrainConfig
from .data import Batch
from .evaluator import emit_grid
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from .generator import Generator, GeneratorConfig, build_generator, count_parameters, generator_forward
from .losses import (
    DistanceMetric, alignment_loss, build_guidance, dis_fm_loss, mae_loss, ragan_d_loss, ragan_g_loss,
    self_guided_loss, total_g_loss, vgg_fm_loss,
)
from .masking import compose_output, crop_patches, make_input
from .serialization import ManifestError, load_into, load_manifest, save_manifest, state_checksum
from .vgg import VGG19Features

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "mae", "self_guided", "fm_vgg", "fm_dis", "adv_g", "adv_d", "align", "total")
EMA_DECAY = 0.9
ALIGN_TAP = 3  # relu4_1


class NumericError(FloatingPointError):
    def __init__(self, iteration: int, term: str, batch_ids: Iterable[str] = ()):
        self.iteration, self.term, self.batch_ids = iteration, term, tuple(batch_ids)
        super().__init__(f"non-finite {term} loss at iteration {iteration} (batch {list(self.batch_ids)})")


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    iteration: int = 0
    averages: dict = field(default_factory=dict)

    def weight_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"G.{k}": v for k, v in self.generator.state_dict().items()}
        out.update({f"D.{k}": v for k, v in self.discriminator.state_dict().items()})
        return out


def _adam(module: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def new_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: TrainConfig,
              dtype: torch.dtype = torch.float32) -> TrainState:
    torch.manual_seed(cfg.seed)
    g = build_generator(gen_cfg).to(dtype)
    d = build_discriminator(disc_cfg).to(dtype)
    return TrainState(g, d, _adam(g, cfg), _adam(d, cfg))


class Trainer:
    """Holds the fixed pieces of a run (VGG, loss weights, metric) and advances a ``TrainState``."""

    def __init__(self, vgg: VGG19Features, cfg: TrainConfig, weights: LossWeights = LossWeights(),
                 metric: DistanceMetric = DistanceMetric()):
        self.vgg, self.cfg, self.weights, self.metric = vgg, cfg, weights, metric

    def generator_terms(self, state: TrainState, batch: Batch, out: torch.Tensor,
                        fake_patch: torch.Tensor, real_patch: torch.Tensor) -> dict[str, torch.Tensor]:
        gt = batch.gt.data
        d = state.discriminator
        with torch.no_grad():
            s_real, taps_real = d(gt, real_patch)
            gt_pyr = self.vgg(gt)
        s_fake, taps_fake = d(out, fake_patch)
        out_pyr = self.vgg(out)
        guide = build_guidance(out, gt, self.metric)
        return {
            "mae": mae_loss(out, gt),
            "self_guided": self_guided_loss(out_pyr[:2], gt_pyr[:2], guide),
            "fm_vgg": vgg_fm_loss(out_pyr, gt_pyr),
            "fm_dis": dis_fm_loss(taps_fake, taps_real),
            "adv": ragan_g_loss(s_real, s_fake),
            "align": alignment_loss(out_pyr[ALIGN_TAP], gt_pyr[ALIGN_TAP]),
        }

    def train_step(self, state: TrainState, batch: Batch) -> tuple[TrainState, dict[str, float]]:
        """Update ``state`` in place (critic first, then generator) and return per-term losses."""
        cfg = self.cfg
        g, d = state.generator, state.discriminator
        g.train()
        d.train()
        it = state.iteration + 1
        img_in = make_input(batch.gt, batch.mask)
        pred = generator_forward(g, img_in, batch.mask)
        out = compose_output(img_in, pred, batch.mask).data
        gt = batch.gt.data
        real_patch = crop_patches(gt, batch.boxes, cfg.local_patch)

        # critic step on the detached composite
        d.requires_grad_(True)
        s_real, _ = d(gt, real_patch)
        s_fake, _ = d(out.detach(), crop_patches(out.detach(), batch.boxes, cfg.local_patch))
        d_loss = ragan_d_loss(s_real, s_fake)
        self._check(it, "adv_d", d_loss, batch)
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self._clip(d)
        state.opt_d.step()

        # generator step; critic weights are constants for every term here
        d.requires_grad_(False)
        try:
            parts = self.generator_terms(state, batch, out, crop_patches(out, batch.boxes, cfg.local_patch),
                                         real_patch)
            for name, v in parts.items():
                self._check(it, name, v, batch)
            total = total_g_loss(parts, self.weights)
            self._check(it, "total", total, batch)
            state.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self._clip(g)
            state.opt_g.step()
        finally:
            d.requires_grad_(True)

        state.iteration = it
        self._schedule(state)
        losses = {k: v.item() for k, v in parts.items()}
        losses["adv_g"] = losses.pop("adv")
        losses["adv_d"] = d_loss.item()
        losses["total"] = total.item()
        for k, v in losses.items():
            prev = state.averages.get(k)
            state.averages[k] = v if prev is None else EMA_DECAY * prev + (1 - EMA_DECAY) * v
        return state, losses

    def _check(self, it: int, term: str, value: torch.Tensor, batch: Batch):
        if not torch.isfinite(value).all():
            raise NumericError(it, term, batch.ids)

    def _clip(self, module: torch.nn.Module):
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(module.parameters(), self.cfg.grad_clip)

    def _schedule(self, state: TrainState):
        cfg = self.cfg
        if cfg.lr_decay_every > 0 and state.iteration % cfg.lr_decay_every == 0:
            for opt in (state.opt_g, state.opt_d):
                for group in opt.param_groups:
                    group["lr"] *= cfg.lr_decay_gamma


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}.{idx}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    return tensors, sd["param_groups"]


def save_checkpoint(state: TrainState, path: str | Path, config_hash: str = "", extra: dict | None = None) -> str:
    tensors = state.weight_tensors()
    og, groups_g = _optimizer_tensors("optG", state.opt_g)
    od, groups_d = _optimizer_tensors("optD", state.opt_d)
    tensors.update(og)
    tensors.update(od)
    tensors["rng.torch"] = torch.get_rng_state()
    meta = {
        "iteration": state.iteration,
        "config_hash": config_hash,
        "averages": state.averages,
        "param_groups": {"G": groups_g, "D": groups_d},
        "weights_checksum": state_checksum(state.weight_tensors()),
        "generator_parameters": count_parameters(state.generator),
    }
    meta.update(extra or {})
    return save_manifest(path, tensors, meta)


def _restore_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict, groups: list):
    state: dict = {}
    for name, t in tensors.items():
        if name.startswith(prefix + "."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups})


def load_checkpoint(path: str | Path, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                    cfg: TrainConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    tensors, meta = load_manifest(path)
    state = new_state(gen_cfg, disc_cfg, cfg, dtype)
    load_into(state.generator, tensors, "G.")
    load_into(state.discriminator, tensors, "D.")
    try:
        _restore_optimizer(state.opt_g, "optG", tensors, meta["param_groups"]["G"])
        _restore_optimizer(state.opt_d, "optD", tensors, meta["param_groups"]["D"])
    except (KeyError, ValueError) as e:
        raise ManifestError(f"{path}: optimizer state does not match the model: {e}") from e
    if "rng.torch" in tensors:
        torch.set_rng_state(tensors["rng.torch"])
    state.iteration = int(meta.get("iteration", 0))
    state.averages = dict(meta.get("averages", {}))
    return state


def load_generator(path: str | Path, gen_cfg: GeneratorConfig) -> tuple[Generator, dict]:
    tensors, meta = load_manifest(path)
    g = build_generator(gen_cfg)
    load_into(g, tensors, "G.")
    g.eval()
    return g, meta


class LossLog:
    """Append-only CSV of per-iteration losses."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with self.path.open("w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, iteration: int, losses: dict[str, float]):
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([iteration] + [repr(losses[c]) for c in LOG_COLUMNS[1:]])


def run_training(trainer: Trainer, state: TrainState, batches: Iterable[Batch], iterations: int,
                 out_dir: str | Path | None = None, config_hash: str = "",
                 sample_every: int = 0, checkpoint_every: int = 0, meta: dict | None = None) -> list[dict[str, float]]:
    """Train until ``state.iteration == iterations``. Returns the per-step loss dicts."""
    out = Path(out_dir) if out_dir else None
    logbook = LossLog(out / "losses.csv") if out else None
    history = []
    it = iter(batches)
    while state.iteration < iterations:
        batch = next(it)
        try:
            state, losses = trainer.train_step(state, batch)
        except NumericError as e:
            if out:
                out.mkdir(parents=True, exist_ok=True)
                (out / "nan_dump.json").write_text(json.dumps(
                    {"iteration": e.iteration, "term": e.term, "batch_ids": list(e.batch_ids)}, indent=2))
            raise
        history.append(losses)
        if logbook:
            logbook.append(state.iteration, losses)
        if state.iteration % 10 == 0:
            log.info("iter %d total %.4f (ema %.4f)", state.iteration, losses["total"], state.averages["total"])
        if out and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(state, out / "checkpoint.dmfn", config_hash, meta)
        if out and sample_every and state.iteration % sample_every == 0:
            with torch.no_grad():
                g = state.generator
                img_in = make_input(batch.gt, batch.mask)
                comp = compose_output(img_in, generator_forward(g, img_in, batch.mask), batch.mask).data
            rows = [tuple((t[n] + 1) / 2 for t in (img_in.data, comp, batch.gt.data))
                    for n in range(min(4, comp.shape[0]))]
            emit_grid([tuple(r.clamp(0, 1) for r in row) for row in rows],
                      out / f"sample_{state.iteration:06d}.png", config_hash)
    if out:
        save_checkpoint(state, out / "checkpoint.dmfn", config_hash, meta)
    return history


def smoothed(values: list[float], at: int, window: int = 10) -> float:
    """Trailing mean of ``values`` over iterations ``at - window + 1 .. at`` (1-based)."""
    if at < window or at > len(values):
        raise ValueError(f"need at least {window} values up to iteration {at}")
    chunk = values[at - window: at]
    return math.fsum(chunk) / window
