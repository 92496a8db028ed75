"""``vectorcl`` command line: pretrain, probe, analyze, synth.

Every command prints its report as JSON lines on stdout and, unless
``--no-figures`` is given, writes PNG figures into its output directory.
Exit status: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from . import analysis
from . import io as cio
from .corpus import make_synthetic_corpus
from .errors import VectorCLError
from .geometry import AffineRanges, AppearanceConfig, warp
from .pyramid import upsample_double
from .trainer import TrainConfig, load_checkpoint, pretrain

log = logging.getLogger("vectorcl")


class CLIError(Exception):
    """Runtime failure reported with exit status 1."""


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _emit(record: dict, sink=None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line)
    if sink is not None:
        sink.write(line + "\n")


def _prepare_out(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    out = Path(path)
    if not out.parent.exists():
        raise CLIError(f"{out}: parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _load_dataset(args):
    if getattr(args, "data_dir", None):
        return cio.ingest_images(args.data_dir), None
    corpus = make_synthetic_corpus(args.synth_seed, args.synth_count, args.synth_size)
    return corpus.images, corpus.masks


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CLIError(f"{path}: checkpoint file not found")
    return load_checkpoint(path)


# --- pretrain --------------------------------------------------------------

_FLAG_KEYS = {
    "seed": "seed",
    "iters": "iterations",
    "lr": "learning_rate",
    "batch": "batch_size",
    "crop": "crop_size",
    "metric_every": "metric_every",
    "checkpoint_every": "checkpoint_every",
    "dtype": "dtype",
    "objective": "objective",
}


def resolve_config(args) -> TrainConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    merged = TrainConfig().to_dict()
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"{args.config}: cannot read config file ({exc})")
        for key in ("iters", "lr", "batch", "crop"):
            if key in data:
                data[_FLAG_KEYS[key]] = data.pop(key)
        for key in ("N", "J", "tau"):
            if key in data:
                merged["head"][key] = data.pop(key)
        for key in ("data_dir", "synth", "out_dir"):
            data.pop(key, None)
        merged.update(data)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            merged[key] = value
    levels = len(merged["channel_plan"])
    if args.N is not None:
        merged["head"]["N"] = args.N * levels if len(args.N) == 1 else args.N
    if args.J is not None:
        merged["head"]["J"] = args.J
    if args.tau is not None:
        merged["head"]["tau"] = args.tau
    cfg = TrainConfig.from_dict(merged)
    cfg.validate()
    return cfg


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args.out)
    images, _ = _load_dataset(args)
    resume = None
    if args.resume:
        resume = _load_ckpt(out / "checkpoint.covc")
    record = {"command": "pretrain", "resolved_config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    record["data"] = {"source": args.data_dir or "synth", "count": int(len(images))}
    if not args.data_dir:
        record["data"].update(seed=args.synth_seed, size=args.synth_size)
    cio.atomic_write_bytes(out / "config.json", (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())
    history: List[dict] = []
    ckpt = pretrain(cfg, images, out_dir=out, resume=resume, history=history)
    summary = {"command": "pretrain", "iteration": ckpt.iteration, "checkpoint": str(out / "checkpoint.covc")}
    if history:
        summary["final"] = history[-1]
    _emit(summary)
    if not args.no_figures:
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines() if l.strip()]
        from .plotting import plot_loss_trace

        plot_loss_trace(records, out / "loss_trace.png")
    return 0


# --- probe -----------------------------------------------------------------


def cmd_probe(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    out = _prepare_out(args.out)
    corpus = make_synthetic_corpus(args.synth_seed, args.synth_count, args.synth_size)
    cfg = analysis.ProbeConfig(steps=args.steps, learning_rate=args.lr)
    groups = TrainConfig.from_dict(ckpt.config).head.J
    rows = analysis.linear_probe(ckpt.params, corpus.images, corpus.masks, args.seeds, cfg, groups=groups)
    sink = open(out / "probe.jsonl", "w") if out else None
    try:
        for row in rows:
            _emit({"command": "probe", **dataclasses.asdict(row)}, sink)
        mean_p = float(np.mean([r.dice_pretrained for r in rows]))
        mean_r = float(np.mean([r.dice_random for r in rows]))
        _emit({"command": "probe", "summary": True, "mean_dice_pretrained": mean_p, "mean_dice_random": mean_r,
               "steps": args.steps}, sink)
    finally:
        if sink:
            sink.close()
    if out and not args.no_figures:
        from .plotting import plot_probe

        plot_probe([dataclasses.asdict(r) for r in rows], out / "probe.png")
    return 0


# --- analyze ---------------------------------------------------------------


def _flops_report(args, sink, out):
    channels = args.channels
    plan = TrainConfig().head
    levels = len(channels)
    N = args.N * levels if args.N and len(args.N) == 1 else (args.N or list(plan.N))
    J = args.J or list(plan.J)
    from .pyramid import vpa_receptive_field

    v = analysis.flops_estimate("vpa", N, channels, J, (args.size, args.size))
    d = analysis.flops_estimate("direct", channels=channels, J=J, size=(args.size, args.size), rf=args.rf)
    _emit({"command": "analyze", "report": "flops", "rf": args.rf, "vpa_rf": vpa_receptive_field(N),
           "vpa": v.total, "direct": d.total, "ratio": d.total / v.total}, sink)
    if out and not args.no_figures:
        from .plotting import plot_flops

        rows = []
        for rf in range(7, max(args.rf, 7) + 1, 6):
            rows.append({"rf": rf, "vpa": v.total,
                         "direct": analysis.flops_estimate("direct", channels=channels, J=J,
                                                           size=(args.size, args.size), rf=rf).total})
        plot_flops(rows, out / "flops.png")


def cmd_analyze(args) -> int:
    out = _prepare_out(args.out)
    sink = open(out / "analysis.jsonl", "w") if out else None
    try:
        if args.flops:
            _flops_report(args, sink, out)
        needs_model = args.dispersion or args.epe or args.warped_views or args.dump_features
        if args.identity:
            _identity_report(args, sink)
        if not needs_model:
            return 0
        if not args.checkpoint:
            raise CLIError("--dispersion/--epe/--warped-views/--dump-features need --checkpoint")
        ckpt = _load_ckpt(args.checkpoint)
        cfg = TrainConfig.from_dict(ckpt.config)
        images, _ = _load_dataset(args)
        images = images[: args.pairs]
        params = ckpt.params
        x = torch.as_tensor(images, dtype=params.dtype).unsqueeze(1)
        if args.dispersion:
            feats = analysis.frozen_features(params, images)
            rep = analysis.dispersion_delta(feats, args.radius, args.tau)
            bound = analysis.bound_report(rep)
            _emit({"command": "analyze", "report": "dispersion", "radius": args.radius, "tau": rep.tau,
                   "alpha_min": rep.alpha_min, **bound.as_record()}, sink)
            if out and not args.no_figures:
                from .plotting import plot_dispersion

                plot_dispersion({"delta": rep.delta_per_pixel[0].numpy()}, out / "dispersion.png")
        if args.epe:
            rep = analysis.evaluate_alignment(params, images, len(images), args.pair_seed, cfg.head,
                                              cfg.appearance, cfg.affine)
            _emit({"command": "analyze", "report": "epe", **dataclasses.asdict(rep)}, sink)
        if args.dump_features:
            from .backbone import forward

            with torch.no_grad():
                feats = forward(params, x[:1])
            for level, f in enumerate(feats):
                cio.write_tensor(out / f"features_level{level}.covt", f[0])
            _emit({"command": "analyze", "report": "features", "levels": len(feats), "dir": str(out)}, sink)
        if args.warped_views:
            _warped_views(params, cfg, images, args, sink, out)
    finally:
        if sink:
            sink.close()
    return 0


def _identity_report(args, sink):
    images, _ = _load_dataset(args)
    x_a, x_b, psi, mask = analysis.draw_pairs(images[:1], 1, args.pair_seed, AppearanceConfig.disabled(),
                                              AffineRanges.identity())
    rec = {"command": "analyze", "report": "identity",
           "epe_gt_vs_zero": analysis.endpoint_error(torch.zeros_like(psi), psi, mask),
           "mask_fraction": float(mask.mean())}
    _emit(rec, sink)


def _warped_views(params, cfg, images, args, sink, out):
    if out is None:
        raise CLIError("--warped-views needs --out")
    x_a, x_b, psi, mask = analysis.draw_pairs(images, 1, args.pair_seed, cfg.appearance, cfg.affine,
                                              params.dtype)
    _, fields = analysis.predict_field(params, x_a, x_b, cfg.head)
    H, W = x_a.shape[-2:]
    warped = []
    for level, f in enumerate(fields):
        full = f
        while full.shape[-1] < W:
            full = upsample_double(full, 2 * full.shape[-2], 2 * full.shape[-1])
        w = warp(x_a, full)[0, 0]
        warped.append(w.numpy())
        cio.write_tensor(out / f"warped_level{level}.covt", w)
        err = analysis.endpoint_error(full, psi, mask)
        _emit({"command": "analyze", "report": "warped_view", "level": level, "epe": err}, sink)
    if not args.no_figures:
        from .plotting import plot_warped_views

        plot_warped_views(x_a[0, 0].numpy(), x_b[0, 0].numpy(), warped, out / "warped_views.png")


# --- synth -----------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _prepare_out(args.out)
    corpus = make_synthetic_corpus(args.seed, args.count, args.size)
    (out / "masks").mkdir(exist_ok=True)
    for k, (img, m) in enumerate(zip(corpus.images, corpus.masks)):
        if args.format == "pgm":
            cio.write_pgm(out / f"img_{k:04d}.pgm", img, maxval=65535)
        else:
            cio.write_tensor(out / f"img_{k:04d}.covt", img)
        cio.write_pgm(out / "masks" / f"mask_{k:04d}.pgm", m.astype(np.float64) / 255.0, maxval=255)
    _emit({"command": "synth", "count": args.count, "size": args.size, "seed": args.seed, "dir": str(out)})
    return 0


# --- parser ----------------------------------------------------------------


def _add_data_flags(p, synth_count=200, synth_seed=0):
    p.add_argument("--data-dir", help="directory of .pgm/.covt images")
    p.add_argument("--synth", action="store_true", help="use the synthetic corpus (default when no --data-dir)")
    p.add_argument("--synth-seed", type=int, default=synth_seed)
    p.add_argument("--synth-count", type=int, default=synth_count)
    p.add_argument("--synth-size", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vectorcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised vector pretraining")
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--N", type=_int_list, help="window side per level, or one value for all")
    p.add_argument("--J", type=_int_list, help="group count per level (default 4,4,4,1,1)")
    p.add_argument("--tau", type=float, help="fixed attention temperature")
    p.add_argument("--metric-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--objective", choices=["cover", "infonce"])
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.covc")
    p.add_argument("--no-figures", action="store_true")
    _add_data_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="frozen-feature linear segmentation probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--synth-seed", type=int, default=100)
    p.add_argument("--synth-count", type=int, default=64)
    p.add_argument("--synth-size", type=int, default=64)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("analyze", help="dispersion, FLOP, alignment and view reports")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--flops", action="store_true")
    p.add_argument("--rf", type=int, default=121, help="direct-window side for the FLOP comparison")
    p.add_argument("--channels", type=_int_list, default=[8, 16, 16, 32, 32])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--N", type=_int_list)
    p.add_argument("--J", type=_int_list)
    p.add_argument("--dispersion", action="store_true")
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--tau", type=float)
    p.add_argument("--epe", action="store_true")
    p.add_argument("--identity", action="store_true", help="EPE/mask report on an identity-transform pair")
    p.add_argument("--warped-views", action="store_true")
    p.add_argument("--dump-features", action="store_true")
    p.add_argument("--pairs", type=int, default=16)
    p.add_argument("--pair-seed", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    _add_data_flags(p, synth_count=16, synth_seed=100)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="write the synthetic corpus to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--format", choices=["covt", "pgm"], default="covt")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, VectorCLError, OSError) as exc:
        print(f"vectorcl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
