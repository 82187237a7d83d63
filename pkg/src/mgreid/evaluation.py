"""Retrieval metrics, mask quality against oracle parts, and mask heatmaps."""
from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import PARTS
from .encoder import ImageEncoder
from .grounding import oracle_label_matrix

log = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    mAP: float
    rank1: float
    aps: list[float] = field(default_factory=list)
    num_queries: int = 0
    excluded_queries: int = 0


@dataclass
class MaskQuality:
    per_part_iou: dict[str, float]

    @property
    def mean_iou(self) -> float:
        return float(np.mean(list(self.per_part_iou.values())))


@torch.no_grad()
def extract_features(model: ImageEncoder, images: torch.Tensor, mask_source: str = "predicted",
                     batch_size: int = 128) -> torch.Tensor:
    """Unit-normalized post-BN features from the image encoder alone."""
    model.eval()
    feats = [model.bn_neck(model(images[i:i + batch_size], mask_source).feature)
             for i in range(0, images.shape[0], batch_size)]
    return F.normalize(torch.cat(feats), dim=1)


def average_precision(relevant: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance vector."""
    hits = np.flatnonzero(relevant)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def compute_map_cmc(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams) -> RetrievalResult:
    """Cross-camera retrieval; same-identity same-camera gallery items are ignored.

    Ties in similarity are broken by ascending gallery index.
    """
    q_feats = np.asarray(q_feats, dtype=np.float64)
    g_feats = np.asarray(g_feats, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    qn = q_feats / np.linalg.norm(q_feats, axis=1, keepdims=True)
    gn = g_feats / np.linalg.norm(g_feats, axis=1, keepdims=True)
    sims = qn @ gn.T

    aps, top1 = [], []
    excluded = 0
    for i in range(len(q_ids)):
        order = np.argsort(-sims[i], kind="stable")
        valid = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        ranked = order[valid]
        relevant = g_ids[ranked] == q_ids[i]
        if not relevant.any():
            excluded += 1
            continue
        aps.append(average_precision(relevant))
        top1.append(bool(relevant[0]))
    if excluded:
        log.warning("%d queries have no valid gallery match and were skipped", excluded)
    if not aps:
        return RetrievalResult(0.0, 0.0, [], 0, excluded)
    return RetrievalResult(float(np.mean(aps)), float(np.mean(top1)), aps, len(aps), excluded)


def random_rank1_baseline(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams,
                          shuffles: int = 100, seed: int = 0) -> float:
    """Mean Rank-1 after randomly permuting the gallery's (id, camera) labels."""
    rng = np.random.default_rng(seed)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    scores = []
    for _ in range(shuffles):
        perm = rng.permutation(len(g_ids))
        scores.append(compute_map_cmc(q_feats, q_ids, q_cams, g_feats, g_ids[perm], g_cams[perm]).rank1)
    return float(np.mean(scores))


def set_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou_per_part(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """Mean IoU per part over a batch of (B, 3, N) binary masks."""
    return {p: float(np.mean([set_iou(pred[b, k], target[b, k]) for b in range(pred.shape[0])]))
            for k, p in enumerate(PARTS)}


@torch.no_grad()
def final_mask_probs(model: ImageEncoder, images: torch.Tensor, mask_source: str = "predicted",
                     batch_size: int = 128) -> torch.Tensor:
    model.eval()
    out = [model(images[i:i + batch_size], mask_source).mask_probs[:, -1]
           for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out)


def mask_quality(model: ImageEncoder, samples, mask_source: str = "predicted") -> MaskQuality:
    if model.rmp is None:
        raise ValueError("model has no mask predictor")
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    probs = final_mask_probs(model, images, mask_source).numpy()
    grid = (*model.grid, model.patch_size)
    target = np.stack([oracle_label_matrix(s, grid) for s in samples])
    return MaskQuality(mask_iou_per_part(probs > model.cfg.threshold, target))


def heatmap_image(probs: np.ndarray, grid: tuple[int, int], patch_size: int) -> Image.Image:
    rows, cols = grid
    values = np.clip(np.asarray(probs, dtype=np.float64).reshape(rows, cols), 0.0, 1.0)
    pixels = np.round(values * 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((patch_size, patch_size), dtype=np.uint8))
    return Image.fromarray(pixels, mode="L")


def render_mask_heatmaps(model: ImageEncoder, samples, out_dir: str | Path,
                         mask_source: str = "predicted") -> list[Path]:
    """One grayscale PNG per (sample, part) of the final-layer mask probabilities."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc.strerror}") from exc
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    probs = final_mask_probs(model, images, mask_source).numpy()
    written = []
    for s, sample_probs in zip(samples, probs):
        for k, part in enumerate(PARTS):
            path = out_dir / f"{s.sample_id}_{part}.png"
            try:
                fd, tmp = tempfile.mkstemp(prefix=".heat-", suffix=".png", dir=out_dir)
                os.close(fd)
                heatmap_image(sample_probs[k], model.grid, model.patch_size).save(tmp, format="PNG")
                os.replace(tmp, path)
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
            written.append(path)
    return written
