"""Image-HOI fusion: project visual tokens and HOI tag embeddings into one
space, add positions, and let the tag tokens cross-attend to the image."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .layers import DecoderLayer, sine_position_grid
from .vocab import HOI_ID, PAD_ID, SEP_ID


class Projector(nn.Module):
    """Linear -> ReLU -> Linear, applied tokenwise."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden or out_dim)
        self.fc2 = nn.Linear(hidden or out_dim, out_dim)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projector expects dimension {self.in_dim}, got {x.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass
class FusionConfig:
    d_visual: int = 64
    d_model: int = 128
    grid: int = 8
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_tags: int = 16
    without_pos: bool = False


@dataclass
class FusedFeatures:
    tokens: torch.Tensor  # (B, G*G + T, d_f): visual tokens then tag tokens
    padding: torch.Tensor  # (B, G*G + T) bool, True = padding
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer (B, H, T, G*G)


def split_tag_groups(tag_ids) -> list[list[int]]:
    """Token groups of a serialized tag sequence, one per triple (the leading [HOI] is dropped)."""
    groups, cur = [], []
    for t in list(tag_ids)[1:]:
        if t == SEP_ID:
            if cur:
                groups.append(cur)
            cur = []
        elif t != PAD_ID:
            cur.append(int(t))
    if cur:
        groups.append(cur)
    return groups


class ImageHoiFusion(nn.Module):
    def __init__(self, config: FusionConfig | None = None):
        super().__init__()
        self.config = config = config or FusionConfig()
        d = config.d_model
        self.visual_proj = Projector(config.d_visual, d)
        self.tag_proj = Projector(d, d)
        self.tag_type = nn.Parameter(torch.zeros(d))
        self.role_embed = nn.Parameter(torch.randn(3, d) * 0.1)  # human / action / object slot
        self.register_buffer("pos", sine_position_grid(config.grid, d), persistent=False)
        self.layers = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_dim, self_attention=False) for _ in range(config.n_layers)
        )

    def embed_tags(self, token_embedding: nn.Embedding, tag_sequences) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed serialized tag sequences with the caption decoder's token table.

        Each sample yields the [HOI] token followed by one mean-pooled vector per triple.
        Returns (B, T, d) embeddings and a (B, T) padding mask.
        """
        weight = token_embedding.weight
        rows = []
        for seq in tag_sequences:
            vecs = [weight[HOI_ID]]
            for group in split_tag_groups(seq)[: self.config.max_tags]:
                emb = weight[torch.tensor(group)]
                role_ids = [0] + [1] * (len(group) - 2) + [2] if len(group) >= 2 else [0]
                vecs.append((emb + self.role_embed[role_ids]).mean(0))
            rows.append(torch.stack(vecs))
        T = max(len(r) for r in rows)
        out = weight.new_zeros(len(rows), T, weight.shape[1])
        pad = torch.ones(len(rows), T, dtype=torch.bool)
        for b, r in enumerate(rows):
            out[b, : len(r)] = r
            pad[b, : len(r)] = False
        return out, pad

    def project(self, visual: torch.Tensor, tags: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.visual_proj(visual), self.tag_proj(tags)

    def embed_positions(self, visual: torch.Tensor, tags: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.config.without_pos:
            return visual, tags
        return visual + self.pos.to(visual.dtype), tags + self.tag_type

    def cross_attend(self, tags, visual, tag_padding=None) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if visual.shape[1] == 0:
            raise ValueError("cross-attention needs at least one visual token")
        maps = []
        x = tags
        for layer in self.layers:
            x, w = layer(x, visual)
            maps.append(w)
        if tag_padding is not None:
            x = x.masked_fill(tag_padding[..., None], 0.0)
        return x, maps

    def forward(self, visual_tokens, tag_embeddings, tag_padding) -> FusedFeatures:
        vis, tags = self.project(visual_tokens, tag_embeddings)
        vis, tags = self.embed_positions(vis, tags)
        tags, maps = self.cross_attend(tags, vis, tag_padding)
        vis_pad = torch.zeros(vis.shape[:2], dtype=torch.bool)
        return FusedFeatures(torch.cat([vis, tags], dim=1), torch.cat([vis_pad, tag_padding], dim=1), maps)
