"""Synthetic multi-granularity person re-identification pipeline.

Every command works inside one run directory (``--out``)::

    <out>/data/            gen-data: images/ + manifest.json
    <out>/labels.jsonl     annotate: per (sample, part) boxes and patch masks
    <out>/stage1/          train --stage 1: checkpoint.pt, prompts.pt, losses.csv
    <out>/stage2/          train --stage 2: checkpoint.pt, losses.csv
    <out>/metrics.json     eval
    <out>/heatmaps/        render-masks
    <out>/config.<cmd>.ini resolved configuration of each invocation
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config, parse_granularities
from .data import PipelineError
from .evaluation import render_mask_heatmaps
from .grounding import FileProvider, OracleProvider, annotate, read_label_file, write_label_file
from .pipeline import evaluate
from .synth import GenerationError, generate_dataset, load_manifest
from .trainer import (
    CheckpointError,
    Stage1Result,
    inference_mask_source,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_prompts,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("mgreid")


class RunLayout:
    def __init__(self, out: str | Path):
        self.root = Path(out)
        self.data = self.root / "data"
        self.labels = self.root / "labels.jsonl"
        self.stage1 = self.root / "stage1" / "checkpoint.pt"
        self.prompts = self.root / "stage1" / "prompts.pt"
        self.stage1_log = self.root / "stage1" / "losses.csv"
        self.stage2 = self.root / "stage2" / "checkpoint.pt"
        self.stage2_log = self.root / "stage2" / "losses.csv"
        self.metrics = self.root / "metrics.json"
        self.heatmaps = self.root / "heatmaps"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults < file < flags)")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", help="run directory")
    common.add_argument("--no-corruption", action="store_true",
                        help="disable simulated grounding failures")
    common.add_argument("--mask-source", choices=["predicted", "external", "stripe", "none"])
    common.add_argument("--granularities", help="subset of G,H,U,L, e.g. G or GHUL")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mgreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    p = sub.add_parser("annotate", parents=[common], help="write part pseudo labels")
    p.add_argument("--boxes", help="JSONL of precomputed boxes instead of the oracle provider")
    p.add_argument("--no-calibration", action="store_true")
    p = sub.add_parser("train", parents=[common], help="run a training stage")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    sub.add_parser("eval", parents=[common], help="retrieval and mask metrics on held-out data")
    p = sub.add_parser("render-masks", parents=[common], help="write mask heatmaps")
    p.add_argument("--split", default="query", choices=["train", "query", "gallery"])
    p.add_argument("--limit", type=int, default=None, help="render only the first N samples")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.no_corruption:
        cfg.data.oversize_rate = 0.0
        cfg.data.oversplit_rate = 0.0
    if args.mask_source:
        cfg.model.mask_source = args.mask_source
    if args.granularities:
        parse_granularities(args.granularities)
        cfg.model.granularities = args.granularities
    return cfg.validate()


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".json-", dir=path.parent)
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    os.replace(tmp, path)


def _manifest(layout: RunLayout):
    if not (layout.data / "manifest.json").is_file():
        raise PipelineError(f"no dataset at {layout.data} (run gen-data first)")
    return load_manifest(layout.data)


def _labels(layout: RunLayout):
    if not layout.labels.is_file():
        raise PipelineError(f"no label file at {layout.labels} (run annotate first)")
    return read_label_file(layout.labels)


def cmd_gen_data(cfg: RunConfig, args, layout: RunLayout) -> None:
    manifest = generate_dataset(cfg.data, layout.data)
    log.info("wrote %d samples to %s", len(manifest.samples), layout.data)


def cmd_annotate(cfg: RunConfig, args, layout: RunLayout) -> None:
    manifest = _manifest(layout)
    if args.boxes:
        provider = FileProvider(args.boxes)
    else:
        provider = OracleProvider(manifest, cfg.data.oversize_rate, cfg.data.oversplit_rate, cfg.data.seed)
    rows = annotate(manifest, provider, cfg.calib, splits=("train", "query", "gallery"),
                    calibrate=not args.no_calibration)
    write_label_file(rows, layout.labels)
    log.info("wrote %d label rows to %s", len(rows), layout.labels)


def cmd_train(cfg: RunConfig, args, layout: RunLayout) -> None:
    manifest = _manifest(layout)
    labels = _labels(layout)
    if args.stage == 1:
        result = train_stage1(manifest, labels, cfg, log_path=layout.stage1_log)
        save_checkpoint(result.state(), layout.stage1)
        save_prompts(result.prompts, layout.prompts)
        losses = result.epoch_losses()
        log.info("stage 1 cmp %.4f -> %.4f", losses[0], losses[-1])
        return
    if not layout.stage1.is_file():
        raise PipelineError(f"stage 1 checkpoint missing at {layout.stage1} (run train --stage 1 first)")
    stage1 = Stage1Result.from_state(load_checkpoint(layout.stage1, kind="stage1"))
    result = train_stage2(manifest, labels, stage1, cfg, log_path=layout.stage2_log)
    save_checkpoint(result.state(), layout.stage2)
    log.info("stage 2 done after %d steps", result.step)


def _stage2_model(layout: RunLayout):
    if not layout.stage2.is_file():
        raise PipelineError(f"stage 2 checkpoint missing at {layout.stage2} (run train --stage 2 first)")
    state = load_checkpoint(layout.stage2, kind="stage2")
    return load_model(state), RunConfig.from_dict(state["config"])


def cmd_eval(cfg: RunConfig, args, layout: RunLayout) -> None:
    model, trained_cfg = _stage2_model(layout)
    metrics = evaluate(model, _manifest(layout), trained_cfg)
    _write_json(metrics, layout.metrics)
    print(json.dumps({k: metrics[k] for k in ("mAP", "rank1", "per_part_iou")}))


def cmd_render_masks(cfg: RunConfig, args, layout: RunLayout) -> None:
    model, trained_cfg = _stage2_model(layout)
    samples = _manifest(layout).split(args.split)[: args.limit]
    written = render_mask_heatmaps(model, samples, layout.heatmaps,
                                   inference_mask_source(trained_cfg.model.mask_source))
    log.info("wrote %d heatmaps to %s", len(written), layout.heatmaps)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "eval": cmd_eval,
    "render-masks": cmd_render_masks,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        layout = RunLayout(cfg.out)
        layout.root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, layout)
        cfg.write(layout.root / f"config.{args.command}.ini")
    except (ConfigError, GenerationError, PipelineError, CheckpointError, LookupError, OSError) as exc:
        print(f"mgreid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
