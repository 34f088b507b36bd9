"""Command line entry points: synth, train, predict, eval, report.

Every command is deterministic given its flags and seed, and every output
directory receives a ``config.json`` recording the effective configuration.
Relative input paths are looked up in the working directory first, then under
$GLANDSEG_DATA_ROOT when that is set.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, postprocess, trainer, viz
from .core import ValidationError
from .dataio import DataError, GenerationError
from .inference import predict_image
from .model import (
    ArchConfig,
    CheckpointError,
    MultiChannelNet,
    NumericError,
    ShapeError,
    checkpoint_arch,
    initialize,
    load_checkpoint,
)
from .trainer import ProtocolError, desk_protocol, format_protocol, parse_protocol

DATA_ROOT_ENV = "GLANDSEG_DATA_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_input(path) -> Path:
    """Working-directory path if it exists, else the same path under the data root."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and (Path(root) / p).exists():
        return Path(root) / p
    return p


def write_effective_config(out_dir: Path, command: str, settings: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **settings}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _auto_min_area(height: int, width: int) -> int:
    # 0.25% of the image at desk sizes, capped at the benchmark-scale 100 px
    return int(np.clip(round(0.0025 * height * width), 4, 100))


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    # radius defaults scale with the image so any --size works out of the box
    r_min = args.radius_min if args.radius_min is not None else 9.0 * args.size / 64
    r_max = args.radius_max if args.radius_max is not None else 15.0 * args.size / 64
    cfg = dataio.SynthConfig(
        image_size=args.size,
        radius_range=(r_min, r_max),
        touching_prob=args.touching_prob,
        noise_level=args.noise,
        seed=args.seed,
    )
    samples = dataio.generate_synthetic(cfg, args.n, edge_thickness=args.edge_thickness)
    out_dir = Path(args.out)
    manifest = dataio.write_corpus(samples, out_dir)
    from dataclasses import asdict

    write_effective_config(out_dir, "synth", {
        "n": args.n, "edge_thickness": args.edge_thickness, **asdict(cfg),
    })
    n_objects = sum(s.instances.num_objects for s in samples)
    print(f"wrote {len(samples)} samples ({n_objects} objects) to {out_dir}")
    print(f"manifest: {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _load_protocol(args):
    if args.protocol:
        path = resolve_input(args.protocol)
        if not path.is_file():
            raise DataError(f"protocol file not found: {path}")
        protocol = parse_protocol(path.read_text(), source=str(path))
    else:
        protocol = desk_protocol()
    if args.seed is not None:
        from dataclasses import replace
        protocol = replace(protocol, seed=args.seed)
    return protocol


def cmd_train(args) -> int:
    manifest = dataio.read_manifest(resolve_input(args.manifest))
    samples = dataio.load_dataset(manifest, edge_thickness=args.edge_thickness)
    if not samples:
        raise DataError("training manifest is empty")
    protocol = _load_protocol(args)

    means = dataio.compute_channel_means(samples)
    from dataclasses import replace as dc_replace
    samples = [dc_replace(s, image=dataio.zero_mean(s.image, means)) for s in samples]

    if args.augment:
        h, w = samples[0].image.height, samples[0].image.width
        aug_cfg = dataio.AugmentationConfig(
            hflip=True, rotations=(0, 90, 180, 270),
            shifts=dataio.default_shifts(h, w))
        samples = [out for s in samples for out in dataio.augment(s, aug_cfg)]

    arch = ArchConfig(num_classes=1).scaled(args.scale) if args.scale != 1.0 else ArchConfig()
    model = initialize(MultiChannelNet(arch), seed=protocol.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"channel_means": [float(m) for m in means],
             "edge_thickness": args.edge_thickness}
    records = trainer.run_full_protocol(
        model, samples, protocol, out_dir=out_dir,
        resume_from=resolve_input(args.resume) if args.resume else None,
        extra=extra,
    )
    trainer.write_log_tsv(records, out_dir / "log.tsv")
    dataio.save_channel_means(out_dir / "channel_means.txt", means)
    (out_dir / "protocol.txt").write_text(format_protocol(protocol))
    write_effective_config(out_dir, "train", {
        "manifest": str(args.manifest), "protocol": args.protocol,
        "seed": protocol.seed, "scale": args.scale,
        "edge_thickness": args.edge_thickness, "augment": args.augment,
        "resume": args.resume,
    })
    n_ckpt = len(list((out_dir / "checkpoints").glob("stage_*")))
    print(f"trained {len(protocol.stages)} stages on {len(samples)} samples; "
          f"{n_ckpt} stage checkpoints in {out_dir / 'checkpoints'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict

def cmd_predict(args) -> int:
    ckpt = resolve_input(args.checkpoint)
    arch = checkpoint_arch(ckpt)
    model = MultiChannelNet(arch)
    extra = load_checkpoint(ckpt, model)
    means = extra.get("channel_means")
    edge_thickness = int(extra.get("edge_thickness", args.edge_thickness))

    manifest = dataio.read_manifest(resolve_input(args.manifest))
    out_dir = Path(args.out)
    inst_dir = out_dir / "instances"
    overlay_dir = out_dir / "overlays"
    prob_dir = out_dir / "probmaps"
    for d in (inst_dir, overlay_dir, prob_dir):
        d.mkdir(parents=True, exist_ok=True)

    write_effective_config(out_dir, "predict", {
        "manifest": str(args.manifest), "checkpoint": str(args.checkpoint),
        "channel": args.channel, "tau_g": args.tau_g, "tau_e": args.tau_e,
        "min_area": args.min_area, "suppress_edges": not args.no_suppress,
        "dilation_radius": args.dilation_radius if args.dilation_radius >= 0 else edge_thickness,
        "seed": args.seed,
    })

    count = 0
    for entry in manifest.entries:
        sample = dataio.load_sample(entry, edge_thickness=edge_thickness)
        maps = predict_image(model, sample.image, channel_means=means)
        probs = maps.fusion_probs if args.channel == "fusion" else maps.region_probs
        cfg = postprocess.PostprocessConfig(
            threshold=args.tau_g,
            suppress_edges=not args.no_suppress,
            edge_threshold=args.tau_e,
            min_area=args.min_area if args.min_area >= 0
                     else _auto_min_area(probs.height, probs.width),
            fill_holes=True,
            dilation_radius=args.dilation_radius if args.dilation_radius >= 0
                            else edge_thickness,
        )
        inst = postprocess.extract_instances(probs, maps.edge_prob, cfg)
        dataio.save_instance_png(inst, inst_dir / f"{entry.id}.png")
        np.save(prob_dir / f"{entry.id}_prob.npy", probs.data.astype(np.float32))
        np.save(prob_dir / f"{entry.id}_edge.npy", maps.edge_prob.astype(np.float32))
        viz.save_png(viz.instance_overlay(sample.image.data, inst),
                     overlay_dir / f"{entry.id}.png")
        count += 1
    print(f"predicted {count} images into {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    report = metrics.evaluate_split(resolve_input(args.pred), resolve_input(args.gt))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_report_tsv(report, out_dir / "report.tsv")
    summary = metrics.format_summary(report)
    (out_dir / "summary.txt").write_text(summary)
    write_effective_config(out_dir, "eval", {
        "pred": str(args.pred), "gt": str(args.gt), "seed": args.seed,
    })
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(out_dir, "report", {
        "scores": args.scores, "logs": list(args.log or []),
        "manifest": args.manifest, "pred": args.pred, "seed": args.seed,
    })

    if args.scores:
        table = metrics.read_score_table(resolve_input(args.scores))
        if len(table.rows) >= 2:
            ranked = metrics.rank_sum(table)
            (out_dir / "ranked.tsv").write_text(metrics.format_ranked_table(ranked))
            source = "official" if ranked.from_official else "recomputed within table"
            print(f"rank sums ({source}):")
            order = sorted(range(len(table.rows)), key=lambda i: ranked.rank_sums[i])
            for i in order:
                print(f"  {table.rows[i].method:20s} {ranked.rank_sums[i]}")
        else:
            lines = ["method\t" + "\t".join(metrics.COLUMN_NAMES)]
            for r in table.rows:
                lines.append(r.method + "\t" + "\t".join(f"{s:.6g}" for s in r.scores))
            (out_dir / "ranked.tsv").write_text("\n".join(lines) + "\n")
            print("warning: fewer than 2 methods, table emitted without ranks",
                  file=sys.stderr)

    for log_path in args.log or []:
        records = trainer.read_log_tsv(resolve_input(log_path))
        paths = viz.plot_loss_curves(records, out_dir)
        print(f"loss curves from {log_path}: {len(paths)} stage plots")

    if args.manifest and args.pred:
        manifest = dataio.read_manifest(resolve_input(args.manifest))
        pred_dir = resolve_input(args.pred)
        rows = []
        for entry in manifest.entries[: args.sheet_size]:
            sample = dataio.load_sample(entry)
            pred_path = Path(pred_dir) / f"{entry.id}.png"
            if not pred_path.is_file():
                continue
            pred = dataio.load_instance_png(pred_path)
            img = np.clip(sample.image.data, 0, 255).astype(np.uint8)
            rows.append((
                img,
                viz.instance_overlay(img, sample.instances),
                viz.instance_overlay(img, pred),
            ))
        if rows:
            viz.save_png(viz.overlay_sheet(rows), out_dir / "overlay_sheet.png")
            print(f"overlay sheet with {len(rows)} rows")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser plumbing

def build_parser() -> _Parser:
    parser = _Parser(prog="glandseg",
                     description="Gland-style instance segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--touching-prob", type=float, default=0.6)
    p.add_argument("--noise", type=float, default=9.0)
    p.add_argument("--radius-min", type=float, default=None)
    p.add_argument("--radius-max", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--edge-thickness", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the staged training protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", help="protocol config file (default: desk protocol)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--scale", type=float, default=0.125,
                   help="channel width multiplier (1.0 = full size)")
    p.add_argument("--edge-thickness", type=int, default=2)
    p.add_argument("--augment", action="store_true",
                   help="enumerated flips/rotations/shifts (16x the data)")
    p.add_argument("--resume", help="stage checkpoint directory to resume after")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict instance maps for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=("fusion", "region"), default="fusion")
    p.add_argument("--tau-g", type=float, default=0.5)
    p.add_argument("--tau-e", type=float, default=0.5)
    p.add_argument("--min-area", type=int, default=-1,
                   help="-1 = 0.25%% of the image area (capped at 100 px)")
    p.add_argument("--no-suppress", action="store_true",
                   help="disable edge suppression")
    p.add_argument("--dilation-radius", type=int, default=-1,
                   help="-1 = training edge thickness")
    p.add_argument("--edge-thickness", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plots, overlay sheets, and rank-sum tables")
    p.add_argument("--out", required=True)
    p.add_argument("--scores", help="score table TSV for rank summation")
    p.add_argument("--log", action="append", help="training log TSV (repeatable)")
    p.add_argument("--manifest", help="manifest for overlay sheets")
    p.add_argument("--pred", help="prediction instance dir for overlay sheets")
    p.add_argument("--sheet-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError, ValidationError, CheckpointError,
            ProtocolError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ShapeError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
