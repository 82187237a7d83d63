"""Prototype memories and the training losses of both stages."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ConfigError


@dataclass
class PrototypeMemory:
    """C x d matrix of unit-norm identity prototypes."""

    rows: torch.Tensor
    role: str = "vpm1"
    momentum: float | None = None

    def __post_init__(self) -> None:
        self.rows = F.normalize(self.rows.detach(), dim=1)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @classmethod
    def from_features(cls, features: torch.Tensor, labels: torch.Tensor, num_classes: int,
                      role: str = "vpm1", momentum: float | None = None) -> "PrototypeMemory":
        return cls(centroids(features, labels, num_classes), role, momentum)

    def update(self, features: torch.Tensor, labels: torch.Tensor) -> None:
        if self.momentum is None:
            raise ValueError(f"memory {self.role} has no momentum")
        self.rows = update_prototypes(self.rows, features, labels, self.momentum)


def centroids(features: torch.Tensor, labels: torch.Tensor, num_classes: int,
              eps: float = 1e-8) -> torch.Tensor:
    """Row c = normalized mean of the features labeled c."""
    features = features.detach()
    labels = labels.long()
    counts = torch.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"no samples for identities {missing}")
    sums = torch.zeros(num_classes, features.shape[1], dtype=features.dtype)
    sums.index_add_(0, labels, features)
    means = sums / counts.unsqueeze(1).to(features.dtype)
    norms = means.norm(dim=1)
    if (norms < eps).any():
        bad = torch.nonzero(norms < eps).flatten().tolist()
        raise ValueError(f"centroid of identities {bad} is zero and cannot be normalized")
    return means / norms.unsqueeze(1)


def build_vpm1(features: torch.Tensor, labels: torch.Tensor, num_classes: int) -> PrototypeMemory:
    return PrototypeMemory.from_features(features, labels, num_classes, role="vpm1")


def _rows(memory) -> torch.Tensor:
    return memory.rows if isinstance(memory, PrototypeMemory) else memory


def cosine_logits(x: torch.Tensor, memory) -> torch.Tensor:
    return F.normalize(x, dim=-1) @ F.normalize(_rows(memory), dim=-1).T


def loss_cmp(text_tokens: torch.Tensor, memory, targets: torch.Tensor) -> torch.Tensor:
    """Text-to-visual-prototype cross-entropy over raw cosine similarities."""
    return F.cross_entropy(cosine_logits(text_tokens, memory), targets)


def loss_id(features_bn: torch.Tensor, weight: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(features_bn @ weight.T, targets)


def loss_imp(features: torch.Tensor, memory, targets: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    return F.cross_entropy(cosine_logits(features, memory) / tau, targets)


def smoothed_targets(targets: torch.Tensor, num_classes: int, eps: float, dtype=torch.float32) -> torch.Tensor:
    q = torch.full((targets.shape[0], num_classes), eps / num_classes, dtype=dtype)
    q[torch.arange(targets.shape[0]), targets] = 1.0 - eps + eps / num_classes
    return q


def loss_i2tce(features: torch.Tensor, memory, targets: torch.Tensor, eps: float = 0.1) -> torch.Tensor:
    logits = cosine_logits(features, memory)
    q = smoothed_targets(targets, logits.shape[1], eps, logits.dtype)
    return -(q * logits.log_softmax(dim=1)).sum(dim=1).mean()


@torch.no_grad()
def update_prototypes(rows: torch.Tensor, features: torch.Tensor, labels: torch.Tensor,
                      momentum: float) -> torch.Tensor:
    """Momentum update towards each batch identity's hardest (least similar) sample."""
    rows = rows.clone()
    feats = F.normalize(features.detach().to(rows.dtype), dim=1)
    for y in sorted(set(labels.tolist())):
        own = feats[labels == y]
        hardest = own[torch.argmin(own @ rows[y])]
        rows[y] = F.normalize(momentum * rows[y] + (1.0 - momentum) * hardest, dim=0)
    return rows


def update_vpm2(memory: PrototypeMemory, features: torch.Tensor, labels: torch.Tensor,
                momentum: float) -> PrototypeMemory:
    memory.rows = update_prototypes(memory.rows, features, labels, momentum)
    return memory


def loss_mask(probs: torch.Tensor, labels: torch.Tensor, eps: float = 1e-6,
              parts: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-element BCE and dice averaged over parts, patches, layers (and batch).

    ``probs`` is (..., L, 3, N) and ``labels`` (..., 3, N); ``parts`` optionally
    selects which part rows take part in the loss.
    """
    if labels.shape[-2:] != probs.shape[-2:] or labels.dim() != probs.dim() - 1:
        raise ValueError(f"mask shapes differ: {tuple(probs.shape)} vs {tuple(labels.shape)}")
    g = labels.to(probs.dtype).unsqueeze(-3).expand_as(probs)
    if parts is not None:
        probs = probs[..., parts, :]
        g = g[..., parts, :]
    if probs.numel() == 0:
        zero = probs.sum() * 0.0
        return zero, zero, zero
    bce = F.binary_cross_entropy(probs, g)
    dice = (1.0 - 2.0 * probs * g / (probs + g + eps)).mean()
    return bce, dice, bce + dice


STAGE_TERMS = {1: ("cmp",), 2: ("id", "imp", "i2tce", "mask")}


def stage_losses(report: dict[str, torch.Tensor | float], stage: int):
    if stage not in STAGE_TERMS:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    terms = [report[name] for name in STAGE_TERMS[stage]]
    for name, value in zip(STAGE_TERMS[stage], terms):
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {name} is not finite ({v})")
    return sum(terms[1:], terms[0])
