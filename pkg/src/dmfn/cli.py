"""Command-line entry points: train, eval, inpaint, inspect, ablate.

Exit codes: 0 success, 2 configuration error, 3 data/IO error, 4 numeric failure.
Any ``--section.key value`` option not listed below is applied as a dotted
override on the JSON config (values parsed as JSON when possible).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, RunConfig
from .core import ContractError, ImageBatch, Mask
from .data import DataError, batch_iterator
from .debug import emit_debug_maps
from .evaluator import LPIPSAdapter, _png_info, evaluate_dataset, quantize
from .generator import AblationVariant, DMFBConfig, build_dmfb, count_parameters, generator_forward
from .masking import MaskLoadError, compose_output, make_input
from .serialization import ManifestError, read_header
from .trainer import NumericError, Trainer, load_checkpoint, load_generator, new_state, run_training
from .vgg import VGGWeightsError, load_vgg19

log = logging.getLogger("dmfn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.dmfn"


def parse_overrides(extra: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognised argument {tok!r} (overrides look like --section.key value)")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _load_config(args, extra) -> RunConfig:
    overrides = parse_overrides(extra)
    if getattr(args, "ablation", None):
        overrides["ablation"] = json.dumps(args.ablation)
    if getattr(args, "debug_maps", False):
        overrides["debug_maps"] = "true"
    if getattr(args, "output_dir", None):
        overrides["paths.output_dir"] = json.dumps(args.output_dir)
    return RunConfig.load(args.config, overrides)


def _config_from_checkpoint(path: str, fallback: str | None) -> RunConfig:
    if fallback:
        return RunConfig.load(fallback)
    meta = read_header(path).get("meta", {})
    if "config" not in meta:
        raise ConfigError(f"{path} carries no embedded config; pass --config")
    return RunConfig.from_dict(meta["config"])


def block_parameter_count(cfg: RunConfig) -> int:
    gcfg = cfg.generator_config()
    return count_parameters(build_dmfb(gcfg.dmfb, gcfg.variant))


def cmd_train(args, extra) -> int:
    cfg = _load_config(args, extra)
    tcfg = cfg.train_config()
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    log.info("config hash %s", h)
    log.info("loss weights lambda=%g eta=%g mu=%g gamma=%g; lr=%g betas=(%g, %g) batch=%d; metric=%s",
             cfg.loss.lambda_, cfg.loss.eta, cfg.loss.mu, cfg.loss.gamma, tcfg.learning_rate,
             tcfg.adam_beta1, tcfg.adam_beta2, tcfg.batch_size, cfg.metric())
    n_block = block_parameter_count(cfg)
    log.info("ablation %s: generator block parameter count %d", cfg.variant().label, n_block)
    (out / "run.json").write_text(json.dumps(
        {"config_hash": h, "config": cfg.to_dict(), "block_parameters": n_block}, indent=2, sort_keys=True) + "\n")
    vgg = load_vgg19(cfg.paths.vgg_weights, cfg.paths.vgg_sha256)
    gcfg, dcfg = cfg.generator_config(), cfg.discriminator_config()
    ckpt = out / CHECKPOINT_NAME
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt, gcfg, dcfg, tcfg)
        log.info("resumed from %s at iteration %d", ckpt, state.iteration)
    else:
        state = new_state(gcfg, dcfg, tcfg)
    batches = batch_iterator(cfg.dataset("train"), tcfg, state.iteration, mask_dir=cfg.paths.irregular_mask_dir,
                             workers=args.workers)
    trainer = Trainer(vgg, tcfg, cfg.loss_weights(), cfg.metric())
    hist = run_training(trainer, state, batches, tcfg.iterations, out, h, tcfg.sample_every, tcfg.checkpoint_every,
                        meta={"config": cfg.to_dict()})
    if cfg.debug_maps and hist:
        b = next(batch_iterator(cfg.dataset("train"), tcfg, 0, mask_dir=cfg.paths.irregular_mask_dir))
        with torch.no_grad():
            img_in = make_input(b.gt, b.mask)
            comp = compose_output(img_in, generator_forward(state.generator, img_in, b.mask), b.mask).data
        emit_debug_maps(comp, b.gt.data, vgg, out / "debug_maps", cfg.metric(), h)
    log.info("finished at iteration %d", state.iteration)
    return EXIT_OK


def _load_generator(checkpoint: str, cfg: RunConfig):
    if not Path(checkpoint).is_file():
        raise ManifestError(f"checkpoint not found: {checkpoint}")
    gen, meta = load_generator(checkpoint, cfg.generator_config())
    return gen, meta


def cmd_eval(args, extra) -> int:
    cfg = _load_config(args, extra) if args.config or extra else _config_from_checkpoint(args.checkpoint, None)
    gen, _ = _load_generator(args.checkpoint, cfg)
    tcfg = cfg.train_config()
    out = Path(args.out or cfg.paths.output_dir)
    if args.lpips == "none":
        lp = LPIPSAdapter(None, "absent")
    else:
        lp = LPIPSAdapter.from_package("alex", allow_random_backbone=args.lpips == "alex-random")
    h = cfg.hash()
    report = evaluate_dataset(gen, cfg.dataset(cfg.data.eval_split), tcfg, args.protocol,
                              mask_dir=cfg.paths.irregular_mask_dir, lpips=lp, region=args.region,
                              config_hash=h, grid_path=out / f"eval_{args.protocol}_grid.png")
    csv_path, json_path = report.write(out, f"eval_{args.protocol}")
    means = report.means()
    print(f"{len(report.rows)} images  PSNR {means['psnr']:.3f} dB  SSIM {means['ssim']:.4f}  "
          f"LPIPS {'absent' if means['lpips'] is None else format(means['lpips'], '.4f')}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _read_rgb(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def _read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0 >= 0.5)
    except OSError as e:
        raise MaskLoadError(f"cannot read mask {path}: {e}") from e


def _inpaint_arrays(gen, rgb: np.ndarray, hole: np.ndarray) -> tuple[np.ndarray, torch.Tensor, torch.Tensor]:
    if rgb.shape[:2] != hole.shape:
        raise DataError(f"image is {rgb.shape[1]}x{rgb.shape[0]} but mask is {hole.shape[1]}x{hole.shape[0]}")
    if rgb.shape[0] % 4 or rgb.shape[1] % 4:
        raise DataError("image height and width must be multiples of 4")
    gt = ImageBatch(torch.from_numpy(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)[None] * 2 - 1)
    mask = Mask(torch.from_numpy(hole.astype(np.float32))[None, None])
    with torch.no_grad():
        img_in = make_input(gt, mask)
        out = compose_output(img_in, generator_forward(gen, img_in, mask), mask)
    result = quantize((out.data[0] + 1) / 2)
    # known pixels come straight from the source file
    result = np.where(hole[..., None], result, rgb)
    return result, out.data, gt.data


def cmd_inpaint(args, extra) -> int:
    cfg = _config_from_checkpoint(args.checkpoint, args.config)
    gen, meta = _load_generator(args.checkpoint, cfg)
    result, _, _ = _inpaint_arrays(gen, _read_rgb(args.image), _read_mask(args.mask))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(result, "RGB").save(args.out, pnginfo=_png_info(meta.get("config_hash", "")))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args, extra) -> int:
    cfg = _config_from_checkpoint(args.checkpoint, args.config)
    gen, meta = _load_generator(args.checkpoint, cfg)
    vgg = load_vgg19(cfg.paths.vgg_weights, cfg.paths.vgg_sha256)
    _, out, gt = _inpaint_arrays(gen, _read_rgb(args.image), _read_mask(args.mask))
    sidecar = emit_debug_maps(out, gt, vgg, args.out, cfg.metric(), meta.get("config_hash", ""))
    print(f"wrote {len(sidecar['maps'])} maps to {args.out}")
    return EXIT_OK


ABLATION_ROWS = ("rate=2", "rate=8", "no_combination", "no_Ki", "full_dmfb")


def ablation_table(wide: bool = False, dmfb: DMFBConfig = DMFBConfig()) -> list[tuple[str, int]]:
    return [(AblationVariant.parse(v, wide).label, count_parameters(build_dmfb(dmfb, AblationVariant.parse(v, wide))))
            for v in ABLATION_ROWS]


def cmd_ablate(args, extra) -> int:
    rows = ablation_table(False) + [r for r in ablation_table(True) if "wide" in r[0]]
    if args.json:
        print(json.dumps(dict(rows), indent=2))
    else:
        width = max(len(r[0]) for r in rows)
        print(f"{'variant':<{width}}  params")
        for name, n in rows:
            print(f"{name:<{width}}  {n:,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmfn", description="Dense multi-scale fusion inpainting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train generator and critic")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--ablation", help="full_dmfb | no_Ki | no_combination | rate=<k>")
    t.add_argument("--output-dir")
    t.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.dmfn")
    t.add_argument("--debug-maps", action="store_true", help="write guidance / average-feature maps")
    t.add_argument("--workers", type=int, default=0, help="image decode threads")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the evaluation split")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=("center", "random", "irregular"), default="center")
    e.add_argument("--region", choices=("full", "hole"), default="full")
    e.add_argument("--lpips", choices=("none", "alex", "alex-random"), default="none")
    e.add_argument("--out", help="report directory (default: paths.output_dir)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inpaint", help="fill the hole of one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--mask", required=True, help="8-bit grayscale PNG, white = hole")
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.set_defaults(func=cmd_inpaint)

    s = sub.add_parser("inspect", help="emit guidance and average-feature maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config")
    s.set_defaults(func=cmd_inspect)

    a = sub.add_parser("ablate", help="print DMFB variant parameter counts")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if extra and args.command not in ("train", "eval"):
        parser.error(f"unrecognised arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MaskLoadError, VGGWeightsError, ManifestError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
