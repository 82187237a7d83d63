"""Image encoder with one global and three local visual tokens."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import (
    NUM_PARTS,
    ResidualMaskPredictor,
    SequenceLayout,
    TransformerBlock,
    blocked_value,
    mask_gate,
    pad_attention_mask,
)
from .config import MASK_SOURCES, PARTS, ModelConfig


@dataclass
class EncodeOutput:
    feature: torch.Tensor  # (B, d) fused, pre-BN
    mask_probs: torch.Tensor | None  # (B, L, 3, N_patch)
    local_tokens: torch.Tensor  # (B, 3, d) after the output projection
    global_token: torch.Tensor  # (B, d)


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, 3) -> (B, N_patch, P*P*3), patches in row-major order."""
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def fuse_tokens(global_token: torch.Tensor, local_tokens: torch.Tensor) -> torch.Tensor:
    """Mean of the global token and the (..., k, d) local tokens."""
    stacked = torch.cat([global_token.unsqueeze(-2), local_tokens], dim=-2)
    return stacked.mean(dim=-2)


def gate_from_labels(labels: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    labels = labels.to(dtype)
    return torch.where(labels > 0, torch.zeros_like(labels), torch.full_like(labels, blocked_value(dtype)))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, image_dims: tuple[int, int], patch_size: int,
                 num_classes: int, am_msa: bool = True, stripe_labels: torch.Tensor | None = None):
        super().__init__()
        h, w = image_dims
        if h % patch_size or w % patch_size:
            raise ValueError(f"image dims {image_dims} not divisible by patch size {patch_size}")
        self.cfg = cfg
        self.patch_size = patch_size
        self.grid = (h // patch_size, w // patch_size)
        self.layout = SequenceLayout(self.grid[0] * self.grid[1])
        n_patch = self.layout.n_patch
        dim = cfg.embed_dim

        self.patch_embed = nn.Linear(patch_size * patch_size * 3, dim)
        self.patch_embed.requires_grad_(False)
        self.global_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.local_tokens = nn.Parameter(torch.randn(NUM_PARTS, dim) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1 + n_patch, dim) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.rmp = (
            nn.ModuleList(ResidualMaskPredictor(dim, n_patch, cfg.rmp_heads) for _ in range(cfg.depth))
            if am_msa else None
        )
        self.register_buffer("initial_logits", torch.full((NUM_PARTS, n_patch), float(cfg.mask_init)))
        if stripe_labels is None:
            stripe_labels = torch.zeros(NUM_PARTS, n_patch)
        self.register_buffer("stripe_labels", stripe_labels.float().clone())
        self.norm_post = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, cfg.out_dim, bias=False)

        self.bottleneck = nn.BatchNorm1d(cfg.out_dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifier = nn.Linear(cfg.out_dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

        active = cfg.active_parts
        self.register_buffer(
            "part_on", torch.tensor([p in active for p in PARTS], dtype=torch.bool), persistent=False
        )

    @property
    def n_patch(self) -> int:
        return self.layout.n_patch

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        return self.patch_embed(patchify(images, self.patch_size))

    def assemble(self, patches: torch.Tensor) -> torch.Tensor:
        """[global, patches, head, upper, legs]; locals reuse the global position."""
        b = patches.shape[0]
        pos_global = self.pos_embed[0]
        glob = (self.global_token + pos_global).expand(b, 1, -1)
        loc = (self.local_tokens + pos_global).expand(b, NUM_PARTS, -1)
        return torch.cat([glob, patches + self.pos_embed[1:], loc], dim=1)

    def forward(self, images: torch.Tensor, mask_source: str = "predicted",
                labels: torch.Tensor | None = None) -> EncodeOutput:
        if mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {mask_source!r}")
        x = self.assemble(self.embed_patches(images))
        b = x.shape[0]
        layout = self.layout
        fixed = None
        if mask_source == "external":
            if labels is None or tuple(labels.shape[-2:]) != (NUM_PARTS, self.n_patch):
                raise ValueError(f"external masks must have shape (B, {NUM_PARTS}, {self.n_patch})")
            fixed = gate_from_labels(labels, x.dtype).expand(b, -1, -1)
        elif mask_source == "stripe":
            stripes = self.stripe_labels if labels is None else labels
            if tuple(stripes.shape[-2:]) != (NUM_PARTS, self.n_patch):
                raise ValueError(f"stripe masks must have shape ({NUM_PARTS}, {self.n_patch})")
            fixed = gate_from_labels(stripes, x.dtype).expand(b, -1, -1)
        elif mask_source == "predicted" and self.rmp is None:
            raise ValueError("predicted masks need the residual mask predictor")

        logits = self.initial_logits.to(x.dtype).expand(b, -1, -1)
        probs_per_layer = []
        for i, block in enumerate(self.blocks):
            gate = fixed
            if self.rmp is not None:
                _, logits, probs = self.rmp[i](x[:, layout.locals], x[:, layout.patches], logits)
                probs_per_layer.append(probs)
                if mask_source == "predicted":
                    gate = mask_gate(probs, self.cfg.threshold)
            full = pad_attention_mask(gate, layout) if gate is not None else None
            x = block(x, full)

        tokens = self.proj(self.norm_post(torch.cat([x[:, :1], x[:, layout.locals]], dim=1)))
        global_token, local_tokens = tokens[:, 0], tokens[:, 1:]
        feature = fuse_tokens(global_token, local_tokens[:, self.part_on])
        mask_probs = torch.stack(probs_per_layer, dim=1) if probs_per_layer else None
        return EncodeOutput(feature, mask_probs, local_tokens, global_token)

    def bn_neck(self, feature: torch.Tensor) -> torch.Tensor:
        return self.bottleneck(feature)

    def base_parameters(self) -> list[nn.Parameter]:
        """Trainable stage-2 parameters outside the mask predictor."""
        rmp_ids = {id(p) for p in self.rmp.parameters()} if self.rmp is not None else set()
        return [p for p in self.parameters() if p.requires_grad and id(p) not in rmp_ids]

    def rmp_parameters(self) -> list[nn.Parameter]:
        return list(self.rmp.parameters()) if self.rmp is not None else []
