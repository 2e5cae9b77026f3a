"""Command-line entry point: ``swinunetr <mode> [--key value ...]``.

Every :class:`RunConfig` field is a flag (``--batch-size 2``, ``--roi 32``,
``--depths 2,2,2,2``). ``--config FILE`` loads key=value defaults first;
explicit flags win over the file, and ``SWIN3D_SEED`` sits between them.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..datapipe import Volume, gen_phantom, read_labeled, read_volume, write_labeled, write_volume
from ..errors import ConfigError, FormatError, NumericError, SamplingError, ShapeError
from ..metrics import evaluate_case, write_report
from ..model import SwinUNETR
from .checkpoint import load_checkpoint
from .config import MODES, RunConfig, check_paths, coerce, resolve
from .infer import sliding_window_infer
from .train import finetune, pretrain

log = logging.getLogger("swinunetr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swinunetr", description="Swin UNETR desk-scale toolkit")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        if f.name == "mode":
            continue
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE")
    return parser


def parse_config(argv=None, env=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    overrides = {k: coerce(k, v) for k, v in vars(args).items()
                 if k not in ("mode", "config", "verbose") and v is not None}
    overrides["mode"] = args.mode
    cfg = resolve(args.config, overrides, env)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return cfg


def run_phantom(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.n_phantoms):
        lv = gen_phantom(cfg.seed * 100003 + i, cfg.phantom_extents, cfg.n_shapes, cfg.n_classes)
        write_labeled(out / f"phantom{i:03d}", lv)
    print(f"wrote {cfg.n_phantoms} phantoms to {out}")


def run_infer(cfg: RunConfig) -> None:
    ck = load_checkpoint(cfg.checkpoint)
    model = SwinUNETR(ck.config.model, params=ck.params)
    inputs = sorted(Path(cfg.input).glob("*.vol")) if Path(cfg.input).is_dir() else [Path(cfg.input)]
    inputs = [p for p in inputs if not p.name.endswith(".lbl.vol")]
    out_dir = Path(cfg.output or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        v = read_volume(path)
        probs = sliding_window_infer(v, model, cfg.roi, cfg.overlap)
        labels = probs.data.argmax(axis=0).astype(np.uint16)
        stem = path.name.removesuffix(".vol").removesuffix(".img")
        write_volume(out_dir / f"{stem}.pred.vol", Volume(labels[None], v.spacing))
        print(f"{path} -> {out_dir / (stem + '.pred.vol')}")


def run_eval(cfg: RunConfig) -> None:
    """``input`` holds ``<stem>.pred.vol`` files, ``gt`` the ``<stem>.lbl.vol`` files."""
    pred_dir, gt_dir = Path(cfg.input), Path(cfg.gt)
    rows = []
    for pred_path in sorted(pred_dir.glob("*.pred.vol")):
        stem = pred_path.name.removesuffix(".pred.vol")
        gt = read_labeled(gt_dir / stem, 0) if (gt_dir / f"{stem}.img.vol").exists() else None
        gt_labels = gt.labels if gt else read_volume(gt_dir / f"{stem}.lbl.vol").data[0].astype(np.int64)
        pred = read_volume(pred_path)
        for cls, metric, value in evaluate_case(gt_labels, pred.data[0].astype(np.int64),
                                                cfg.n_classes, pred.spacing, cfg.nsd_tol):
            rows.append((stem, cls, metric, value))
    if not rows:
        raise ConfigError(f"no *.pred.vol files in {pred_dir}")
    out = Path(cfg.output or Path(cfg.out_dir) / "metrics.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, rows)
    print(f"wrote {len(rows)} rows to {out}")


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        check_paths(cfg)
        if cfg.mode == "phantom":
            run_phantom(cfg)
        elif cfg.mode == "pretrain":
            res = pretrain(cfg)
            print(f"pretrained {res.checkpoint.step} steps, final total loss "
                  f"{res.curve[-1]['total'] if res.curve else float('nan'):.5f}")
        elif cfg.mode == "finetune":
            res = finetune(cfg)
            if res.val_history:
                print(f"finetuned to step {res.checkpoint.step}, val dice {res.val_history[-1][1]:.4f}")
        elif cfg.mode == "infer":
            run_infer(cfg)
        else:
            run_eval(cfg)
    except (ConfigError, FormatError, NumericError, SamplingError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
