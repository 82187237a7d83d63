"""Multi-grained prompt descriptions and a small frozen text transformer."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import TransformerBlock, blocked_value
from .config import GRANULARITIES

VOCAB = ("<sos>", "<eos>", "a", "photo", "of", "person", "head", "upper", "body", "legs")
WORD_ID = {w: i for i, w in enumerate(VOCAB)}

# fixed words before and after the prompt slots
TEMPLATES = {
    "global": ("a photo of a", "person"),
    "head": ("a photo of a", "head of a person"),
    "upper": ("a photo of a", "upper body of a person"),
    "legs": ("a photo of", "legs of a person"),
}
SLOT_NAMES = {"global": "X", "head": "H", "upper": "U", "legs": "L"}
MAX_LEN = 16


class PromptSet(nn.Module):
    """Learnable prompt embeddings, one (4, N, D_prompt) tensor per identity.

    Identities are separate parameters so an optimizer step on one identity
    leaves the others (and their optimizer state) untouched.
    """

    def __init__(self, num_ids: int, length: int, dim: int, std: float = 0.002,
                 generator: torch.Generator | None = None):
        super().__init__()
        if num_ids < 1:
            raise ValueError("need at least one identity")
        self.num_ids, self.length, self.dim = num_ids, length, dim
        self.granularities = GRANULARITIES
        self.prompts = nn.ParameterList(
            nn.Parameter(torch.randn(len(GRANULARITIES), length, dim, generator=generator) * std)
            for _ in range(num_ids)
        )

    def slots(self, ids, granularity: str) -> torch.Tensor:
        g = self.granularities.index(granularity)
        return torch.stack([self.prompts[int(c)][g] for c in ids])

    def as_tensor(self) -> torch.Tensor:
        return torch.stack(list(self.prompts))


def init_prompts(num_ids: int, length: int, dim: int, seed: int = 0) -> PromptSet:
    gen = torch.Generator().manual_seed(seed)
    return PromptSet(num_ids, length, dim, generator=gen)


@dataclass
class Description:
    granularity: str
    words: list[str]
    embeddings: torch.Tensor  # (T, D_prompt); prompt rows are views into the PromptSet graph


class TextEncoder(nn.Module):
    def __init__(self, dim: int, out_dim: int, depth: int = 2, num_heads: int = 4, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.token_embedding = nn.Parameter(torch.randn(len(VOCAB), dim, generator=gen) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(MAX_LEN, dim, generator=gen) * 0.01)
        self.blocks = nn.ModuleList(TransformerBlock(dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.proj = nn.Linear(dim, out_dim, bias=False)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith(("blocks", "proj")) and p.dim() == 2:
                    p.copy_(torch.randn(p.shape, generator=gen) * p.shape[1] ** -0.5)
                elif name.startswith("blocks") and name.endswith("bias"):
                    p.zero_()
        self.requires_grad_(False)
        causal = torch.triu(torch.ones(MAX_LEN, MAX_LEN, dtype=torch.bool), diagonal=1)
        self.register_buffer("causal", causal, persistent=False)

    def word_embeddings(self, words: str) -> torch.Tensor:
        ids = [WORD_ID[w] for w in words.split()]
        return self.token_embedding[ids]

    def build_sequences(self, prompts: PromptSet, ids, granularity: str) -> torch.Tensor:
        if granularity not in TEMPLATES:
            raise ValueError(f"unknown granularity {granularity!r}")
        prefix, suffix = TEMPLATES[granularity]
        slots = prompts.slots(ids, granularity).to(self.token_embedding.dtype)
        b = slots.shape[0]
        head = self.word_embeddings("<sos> " + prefix).expand(b, -1, -1)
        tail = self.word_embeddings(suffix + " <eos>").expand(b, -1, -1)
        return torch.cat([head, slots, tail], dim=1)

    def encode_sequences(self, seq: torch.Tensor) -> torch.Tensor:
        """Sentence embedding = projected output at the final (<eos>) position."""
        t = seq.shape[1]
        x = seq + self.pos_embed[:t]
        mask = torch.zeros(t, t, dtype=x.dtype)
        mask = mask.masked_fill(self.causal[:t, :t], blocked_value(x.dtype))
        for block in self.blocks:
            x = block(x, mask)
        return self.proj(self.norm(x[:, -1]))

    def encode_granularity(self, prompts: PromptSet, ids, granularity: str) -> torch.Tensor:
        return self.encode_sequences(self.build_sequences(prompts, ids, granularity))

    def forward(self, prompts: PromptSet, ids, granularities=GRANULARITIES) -> torch.Tensor:
        """Unit multi-grained text tokens, (len(ids), d)."""
        per_g = [self.encode_granularity(prompts, ids, g) for g in granularities]
        return F.normalize(torch.stack(per_g).mean(dim=0), dim=-1)


def build_description(c: int, granularity: str, prompts: PromptSet, encoder: TextEncoder) -> Description:
    if granularity not in TEMPLATES:
        raise ValueError(f"unknown granularity {granularity!r}")
    prefix, suffix = TEMPLATES[granularity]
    slot = SLOT_NAMES[granularity]
    words = (["<sos>"] + prefix.split() + [f"[{slot}]{n + 1}" for n in range(prompts.length)]
             + suffix.split() + ["<eos>"])
    emb = encoder.build_sequences(prompts, [c], granularity)[0]
    return Description(granularity, words, emb)


def encode_text(encoder: TextEncoder, prompts: PromptSet, c: int, granularities=GRANULARITIES) -> torch.Tensor:
    return encoder(prompts, [c], granularities)[0]
