"""Command-line surface: gen-data, pretrain, train-adapter, sample, eval, ablate-arch.

Flags override config-file keys; every command is a pure function of
(config, seed, input files). MVAK_THREADS caps the torch thread pool.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from . import pipeline
from .config import ConfigError, load_config
from .numerics import Rng


def _apply_thread_cap() -> None:
    raw = os.environ.get("MVAK_THREADS")
    if raw:
        torch.set_num_threads(max(1, int(raw)))


def _config_from_args(args, **extra) -> "RunConfig":
    overrides = dict(extra)
    for key in ("mode", "seed", "count", "steps", "epochs", "arch", "lr"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg.dataset)
    manifest = ds.build_dataset(cfg.count, cfg.mode, cfg.image_size, cfg.image_size,
                                Rng(cfg.seed), out, film_extent=cfg.film_extent)
    print(f"wrote {len(manifest['samples'])} samples ({manifest['n']} views each) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    out = args.out or cfg.out
    data = args.data or cfg.dataset
    _, losses = pipeline.pretrain_backbone(cfg, data, out)
    first = float(np.mean(losses[: max(1, len(losses) // cfg.pretrain_epochs)]))
    last = float(np.mean(losses[-max(1, len(losses) // cfg.pretrain_epochs):]))
    print(f"pretrained backbone: loss {first:.4f} -> {last:.4f}; "
          f"checkpoint {Path(out) / pipeline.BACKBONE_CKPT}")
    return 0


def cmd_train_adapter(args) -> int:
    cfg = _config_from_args(args)
    out = args.out or cfg.out
    data = args.data or cfg.dataset
    backbone = pipeline.load_backbone(cfg, args.backbone)
    _, losses = pipeline.train_adapter(cfg, data, backbone, out)
    print(f"trained adapter ({cfg.arch}, {cfg.mv_mode}): "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"checkpoint {Path(out) / pipeline.ADAPTER_CKPT}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config_from_args(args)
    backbone = pipeline.load_backbone(cfg, args.backbone)
    adapter = pipeline.load_adapter(backbone, cfg, args.adapter)
    ref = ds.read_ppm(args.ref) if args.ref else None
    result = pipeline.sample_views(cfg, backbone, adapter, args.out or cfg.out,
                                   prompt=args.prompt, ref_image=ref, seed=args.seed)
    print(f"wrote {len(result['paths'])} views and {result['grid']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    backbone = pipeline.load_backbone(cfg, args.backbone)
    adapter = pipeline.load_adapter(backbone, cfg, args.adapter)
    summary = pipeline.evaluate_heldout(cfg, backbone, adapter, args.data or cfg.dataset,
                                        args.out or cfg.out)
    print(f"evaluated {summary['samples']} samples: "
          f"psnr {summary['psnr_mean']:.3f} +- {summary['psnr_std']:.3f}, "
          f"ssim {summary['ssim_mean']:.4f} +- {summary['ssim_std']:.4f}")
    return 0


def cmd_ablate_arch(args) -> int:
    cfg = _config_from_args(args)
    backbone = pipeline.load_backbone(cfg, args.backbone)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    results = pipeline.ablate_architectures(
        cfg, args.data or cfg.dataset, args.heldout, backbone, args.out or cfg.out,
        seeds=seeds, epochs=args.epochs, eval_steps=args.eval_steps,
        eval_samples=args.eval_samples,
    )
    for arch in ("serial", "parallel"):
        r = results[arch]
        print(f"{arch:9s} psnr {r['psnr_mean']:.3f} ssim {r['ssim_mean']:.4f}")
    print(pipeline.ABLATION_REFERENCE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvak", description="multi-view adapter kit: data, training, sampling, eval"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="write a procedural multi-view dataset")
    common(p)
    p.add_argument("--mode", default=None,
                   choices=["camera_guided", "geometry_guided", "arbitrary"])
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the single-view backbone")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-adapter", help="train the adapter against a frozen backbone")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--arch", default=None, choices=["parallel", "serial"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("sample", help="generate a multi-view set")
    common(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--prompt", default=None, help="caption words, e.g. 'red cube'")
    p.add_argument("--ref", default=None, help="reference image (binary PPM)")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a held-out dataset")
    common(p)
    p.add_argument("--data", default=None, help="held-out dataset directory")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-arch", help="parallel vs serial adapter comparison")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--heldout", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-steps", type=int, default=None)
    p.add_argument("--eval-samples", type=int, default=None)
    p.set_defaults(func=cmd_ablate_arch)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
