"""Attention building blocks that expose their attention maps."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, key, value, key_padding_mask=None, attn_mask=None):
        """query (B, Lq, D), key/value (B, Lk, D).

        key_padding_mask (B, Lk) and attn_mask (Lq, Lk) are boolean, True = blocked.
        Returns the output (B, Lq, D) and the weights (B, H, Lq, Lk).
        """
        B, Lq, D = query.shape
        Lk = key.shape[1]
        if Lk == 0:
            raise ValueError("attention needs at least one key")
        q = self.q_proj(query).view(B, Lq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(B, Lk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(B, Lk, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        blocked = None
        if attn_mask is not None:
            blocked = attn_mask[None, None, :, :]
        if key_padding_mask is not None:
            kp = key_padding_mask[:, None, None, :]
            blocked = kp if blocked is None else (blocked | kp)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.linear1 = nn.Linear(d_model, hidden)
        self.linear2 = nn.Linear(hidden, d_model)

    def forward(self, x):
        return self.linear2(F.relu(self.linear1(x)))


class DecoderLayer(nn.Module):
    """Post-norm layer: optional self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int, self_attention: bool = True):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads) if self_attention else None
        self.norm1 = nn.LayerNorm(d_model) if self_attention else None
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, x, memory, self_mask=None, self_padding=None, memory_padding=None):
        if self.self_attn is not None:
            h, _ = self.self_attn(x, x, x, key_padding_mask=self_padding, attn_mask=self_mask)
            x = self.norm1(x + h)
        h, cross_weights = self.cross_attn(x, memory, memory, key_padding_mask=memory_padding)
        x = self.norm2(x + h)
        x = self.norm3(x + self.ffn(x))
        return x, cross_weights


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x, pos):
        qk = x + pos
        h, _ = self.attn(qk, qk, x)
        x = self.norm1(x + h)
        return self.norm2(x + self.ffn(x))


def sine_position_table(length: int, dim: int, base: float = 10000.0) -> torch.Tensor:
    """1-D sinusoid table: even channels sin(p / base^(2k/dim)), odd channels cos of the same angle."""
    if dim % 2:
        raise ValueError("dim must be even")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    k = torch.arange(dim // 2, dtype=torch.float64)[None, :]
    angle = pos / base ** (2 * k / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)
    return table


def sine_position_grid(grid: int, dim: int) -> torch.Tensor:
    """(grid*grid, dim) embedding of a row-major token grid: first half encodes y, second half x."""
    if dim % 4:
        raise ValueError("dim must be a multiple of 4")
    axis = sine_position_table(grid, dim // 2)
    y = axis[:, None, :].expand(grid, grid, dim // 2)
    x = axis[None, :, :].expand(grid, grid, dim // 2)
    return torch.cat([y, x], dim=-1).reshape(grid * grid, dim).float()


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, n_layers: int = 2):
        super().__init__()
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x
