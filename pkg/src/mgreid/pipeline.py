"""End-to-end helpers shared by the CLI and the acceptance harness."""
from __future__ import annotations

from typing import Any

import numpy as np
import torch

from .config import RunConfig
from .data import split_tensors
from .encoder import ImageEncoder
from .evaluation import compute_map_cmc, extract_features, mask_quality, random_rank1_baseline
from .grounding import OracleProvider, annotate
from .synth import Manifest, generate_dataset, quantize
from .trainer import Stage1Result, Stage2Result, inference_mask_source, train_stage1, train_stage2


def make_dataset(cfg: RunConfig) -> Manifest:
    """Generate in memory with the same 8-bit quantization a saved dataset has."""
    return quantize(generate_dataset(cfg.data))


def pseudo_labels(manifest: Manifest, cfg: RunConfig, corruption: bool = True,
                  calibrate: bool = True) -> tuple[list, dict[str, np.ndarray]]:
    data = cfg.data
    provider = OracleProvider(
        manifest,
        data.oversize_rate if corruption else 0.0,
        data.oversplit_rate if corruption else 0.0,
        seed=data.seed,
    )
    rows = annotate(manifest, provider, cfg.calib, calibrate=calibrate)
    labels: dict[str, dict[str, np.ndarray]] = {}
    for row in rows:
        labels.setdefault(row.sample_id, {})[row.part] = row.mask
    matrices = {sid: np.stack([parts[p] for p in ("head", "upper", "legs")]) for sid, parts in labels.items()}
    return rows, matrices


def evaluate(model: ImageEncoder, manifest: Manifest, cfg: RunConfig,
             baseline_shuffles: int = 100) -> dict[str, Any]:
    source = inference_mask_source(cfg.model.mask_source)
    query = split_tensors(manifest, "query")
    gallery = split_tensors(manifest, "gallery")
    qf = extract_features(model, query.images, source).numpy()
    gf = extract_features(model, gallery.images, source).numpy()
    result = compute_map_cmc(qf, query.ids.numpy(), query.cams.numpy(), gf, gallery.ids.numpy(), gallery.cams.numpy())
    metrics: dict[str, Any] = {
        "mAP": result.mAP,
        "rank1": result.rank1,
        "num_queries": result.num_queries,
        "excluded_queries": result.excluded_queries,
    }
    if baseline_shuffles:
        metrics["random_rank1"] = random_rank1_baseline(
            qf, query.ids.numpy(), query.cams.numpy(), gf, gallery.ids.numpy(), gallery.cams.numpy(),
            shuffles=baseline_shuffles, seed=cfg.train.seed,
        )
    held_out = manifest.split("query") + manifest.split("gallery")
    if model.rmp is not None and held_out and held_out[0].oracle_boxes:
        quality = mask_quality(model, held_out, "predicted")
        metrics["per_part_iou"] = quality.per_part_iou
        metrics["mean_iou"] = quality.mean_iou
    else:
        metrics["per_part_iou"] = {}
    return metrics


def run_experiment(cfg: RunConfig, manifest: Manifest | None = None,
                   labels: dict[str, np.ndarray] | None = None,
                   stage1: Stage1Result | None = None) -> dict[str, Any]:
    """gen-data -> annotate -> stage 1 -> stage 2 -> eval, all in memory."""
    cfg.validate()
    torch.set_num_threads(1)
    if manifest is None:
        manifest = make_dataset(cfg)
    if labels is None:
        _, labels = pseudo_labels(manifest, cfg)
    if stage1 is None:
        stage1 = train_stage1(manifest, labels, cfg)
    stage1_losses = stage1.epoch_losses()
    stage2: Stage2Result = train_stage2(manifest, labels, stage1, cfg)
    metrics = evaluate(stage2.model, manifest, cfg)
    metrics["stage1_cmp"] = stage1_losses
    metrics["stage2_total"] = stage2.log.epoch_means("stage_total")
    metrics["_stage1"] = stage1
    metrics["_stage2"] = stage2
    return metrics
