from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .synth import Manifest


class PipelineError(RuntimeError):
    """A pipeline stage is missing an input it depends on."""


@dataclass
class SplitTensors:
    images: torch.Tensor  # (N, H, W, 3)
    ids: torch.Tensor
    cams: torch.Tensor
    sample_ids: list[str]
    labels: torch.Tensor | None = None  # (N, 3, N_patch)

    def __len__(self) -> int:
        return len(self.sample_ids)


def split_tensors(manifest: Manifest, split: str, labels: dict[str, np.ndarray] | None = None) -> SplitTensors:
    samples = manifest.split(split)
    if not samples:
        raise PipelineError(f"manifest has no {split!r} samples")
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    g = None
    if labels is not None:
        missing = [s.sample_id for s in samples if s.sample_id not in labels]
        if missing:
            raise PipelineError(f"pseudo labels missing for {len(missing)} samples, e.g. {missing[0]}")
        g = torch.from_numpy(np.stack([labels[s.sample_id] for s in samples]).astype(np.float32))
    return SplitTensors(
        images=images,
        ids=torch.tensor([s.id_label for s in samples]),
        cams=torch.tensor([s.camera_id for s in samples]),
        sample_ids=[s.sample_id for s in samples],
        labels=g,
    )


def pk_batches(ids: np.ndarray, num_ids: int, per_id: int, rng: np.random.Generator,
               num_batches: int | None = None) -> list[np.ndarray]:
    """P identities per batch without replacement, K samples each.

    Samples of an identity are drawn with replacement only when it has fewer
    than K of them.
    """
    ids = np.asarray(ids)
    classes = np.unique(ids)
    p = min(num_ids, len(classes))
    pools = {c: np.flatnonzero(ids == c) for c in classes}
    if num_batches is None:
        num_batches = max(1, len(ids) // (p * per_id))
    batches = []
    for _ in range(num_batches):
        chosen = rng.choice(classes, size=p, replace=False)
        idx = []
        for c in chosen:
            pool = pools[c]
            idx.extend(rng.choice(pool, size=per_id, replace=len(pool) < per_id))
        batches.append(np.asarray(idx))
    return batches


def hflip(images: torch.Tensor, labels: torch.Tensor | None, grid: tuple[int, int]):
    """Mirror images left-right and mirror the patch label columns to match."""
    flipped = images.flip(2)
    if labels is None:
        return flipped, None
    rows, cols = grid
    g = labels.reshape(*labels.shape[:-1], rows, cols).flip(-1).reshape(labels.shape)
    return flipped, g
