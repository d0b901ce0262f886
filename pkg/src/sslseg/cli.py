"""Command line entry point: ``sslseg <stage> [--config F] [--seed N] [--loss K] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .losses import LOSS_KINDS
from .pipeline import STAGES, PipelineConfig, StageError, compare_runs, run_pipeline, run_stage
from .raster_io import save_band_stack, save_label_mask
from .synth import SyntheticSceneSpec, synth_generate

log = logging.getLogger("sslseg")

LOG_ENV = "SSLSEG_LOG_LEVEL"


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--loss", choices=LOSS_KINDS, help="loss kind (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")

    p = argparse.ArgumentParser(prog="sslseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "evaluate":
            sp.add_argument(
                "--compare",
                nargs="+",
                metavar="RUN",
                help="rank runs (metrics.json files or their directories) instead of evaluating",
            )
    sp = sub.add_parser("synth", parents=[common], help="write a synthetic scene and config")
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--noise", type=float, default=0.08)
    sub.add_parser("config", parents=[common], help="print the full default config")
    return p


def _config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.loss is not None:
        cfg = replace(cfg, loss=args.loss)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _metrics_files(paths):
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif (p / "metrics.json").exists():
            found.append(p / "metrics.json")
        else:
            found += [p / k / "metrics.json" for k in LOSS_KINDS if (p / k / "metrics.json").exists()]
    if not found:
        raise StageError(f"evaluate --compare: no metrics.json under {', '.join(paths)}")
    return found


def cmd_synth(args):
    out = Path(args.out or "synth")
    seed = 0 if args.seed is None else args.seed
    # blob counts scale with area from the 128x128 defaults
    base = SyntheticSceneSpec()
    scale = args.width * args.height / (base.width * base.height)
    blobs = tuple(max(1, int(round(n * scale))) for n in base.blobs_per_class)
    size = (min(base.blob_size[0], max(2, min(args.width, args.height) // 4)),
            min(base.blob_size[1], max(3, min(args.width, args.height) // 3)))
    spec = SyntheticSceneSpec(width=args.width, height=args.height, noise=args.noise, seed=seed,
                              blobs_per_class=blobs, blob_size=size)
    stack, mask = synth_generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    save_band_stack(stack, out / "scene")
    save_label_mask(mask, out / "labels")
    cfg = PipelineConfig(bands="scene", labels="labels", out="run", seed=seed,
                         loss=args.loss or "mse")
    cfg.save(out / "config.json")
    print(f"wrote {out / 'scene'}.{{hdr,bin}}, {out / 'labels'}.{{hdr,bin}}, {out / 'config.json'}")


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = _parser().parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        if args.command == "config":
            json.dump(_config(args).to_dict(), sys.stdout, indent=2)
            sys.stdout.write("\n")
            return 0
        if args.command == "evaluate" and args.compare:
            reports = []
            for f in _metrics_files(args.compare):
                with open(f) as fh:
                    reports.append(json.load(fh))
            table, _ = compare_runs(reports)
            sys.stdout.write(table)
            return 0
        cfg = _config(args)
        if args.command == "all":
            report = run_pipeline(cfg)
        else:
            report = run_stage(args.command, cfg)
        if args.command in ("evaluate", "all"):
            sys.stdout.write((cfg.loss_dir / "metrics.txt").read_text())
        elif report:
            print(json.dumps(report, indent=2, sort_keys=True, default=str))
        return 0
    except (StageError, ValueError, FileNotFoundError) as exc:
        print(f"sslseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
