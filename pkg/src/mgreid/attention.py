"""Adaptively masked self-attention: residual mask prediction and mask gating.

Blocked attention entries are encoded with the most negative finite value of the
dtype instead of -inf so that fully blocked rows never produce NaN; the
post-softmax weights of blocked entries are then forced to exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

NUM_PARTS = 3


def blocked_value(dtype: torch.dtype) -> float:
    return torch.finfo(dtype).min


def is_blocked(mask: torch.Tensor) -> torch.Tensor:
    return mask <= blocked_value(mask.dtype) / 2


@dataclass(frozen=True)
class SequenceLayout:
    """Token order: global, patches, then the head/upper/legs local tokens."""

    n_patch: int

    @property
    def length(self) -> int:
        return 1 + self.n_patch + NUM_PARTS

    @property
    def patches(self) -> slice:
        return slice(1, 1 + self.n_patch)

    @property
    def locals(self) -> slice:
        return slice(1 + self.n_patch, 1 + self.n_patch + NUM_PARTS)


def mask_gate(probs: torch.Tensor, threshold: float) -> torch.Tensor:
    """0 where the part probability strictly exceeds the threshold, blocked otherwise."""
    zero = torch.zeros((), dtype=probs.dtype, device=probs.device)
    return torch.where(probs > threshold, zero, torch.full_like(zero, blocked_value(probs.dtype)))


def pad_attention_mask(part_mask: torch.Tensor, layout: SequenceLayout) -> torch.Tensor:
    """Embed a (..., 3, N_patch) part mask into the (..., S, S) additive attention mask.

    Only local-token rows over patch-token columns are filled; everything else is 0.
    """
    if part_mask.shape[-2:] != (NUM_PARTS, layout.n_patch):
        raise ValueError(f"part mask shape {tuple(part_mask.shape)} does not match layout")
    s = layout.length
    full = part_mask.new_zeros(*part_mask.shape[:-2], s, s)
    full[..., layout.locals, layout.patches] = part_mask
    return full


def masked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                     mask: torch.Tensor | None = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d) + mask) v with exact zeros on blocked entries."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is None:
        return scores.softmax(dim=-1) @ v
    weights = (scores + mask).softmax(dim=-1)
    weights = weights.masked_fill(is_blocked(mask), 0.0)
    return weights @ v


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, s, d = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).reshape(b, s, 3, h, d // h).permute(2, 0, 3, 1, 4)
        if mask is not None and mask.dim() == 3:
            mask = mask.unsqueeze(1)
        out = masked_attention(q, k, v, mask)
        return self.proj(out.transpose(1, 2).reshape(b, s, d))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        m = context.shape[1]
        h = self.num_heads
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).reshape(b, m, 2, h, d // h).permute(2, 0, 3, 1, 4)
        out = masked_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class ResidualMaskPredictor(nn.Module):
    """Predict per-part patch logits from local tokens and accumulate them across layers."""

    def __init__(self, dim: int, n_patch: int, num_heads: int = 2):
        super().__init__()
        self.n_patch = n_patch
        self.norm_local = nn.LayerNorm(dim)
        self.norm_patch = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, num_heads)
        self.norm_out = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, n_patch))
        # zero-init: the first forward reproduces the incoming logits exactly
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, local_tokens: torch.Tensor, patch_tokens: torch.Tensor,
                prev_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if local_tokens.shape[-2] != NUM_PARTS or patch_tokens.shape[-2] != self.n_patch:
            raise ValueError(
                f"expected {NUM_PARTS} local and {self.n_patch} patch tokens, got "
                f"{local_tokens.shape[-2]} and {patch_tokens.shape[-2]}"
            )
        if prev_logits.shape[-2:] != (NUM_PARTS, self.n_patch):
            raise ValueError(f"bad logit shape {tuple(prev_logits.shape)}")
        refined = self.cross_attn(self.norm_local(local_tokens), self.norm_patch(patch_tokens)) + local_tokens
        logits = self.mlp(self.norm_out(refined)) + prev_logits
        return refined, logits, torch.sigmoid(logits)


class TransformerBlock(nn.Module):
    """Pre-norm transformer layer whose self-attention accepts an additive mask."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))
