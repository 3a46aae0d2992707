"""Tag-guided autoregressive caption decoder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .layers import DecoderLayer
from .tokenizer import Tokenizer
from .vocab import BOS_ID, EOS_ID, HOI_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID


@dataclass
class CaptionDecoderConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64


@dataclass
class GenerationConfig:
    mode: str = "greedy"  # greedy | beam
    beam_width: int = 1
    max_len: int = 64
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be >= 1")


def serialize_hoi_tags(triples: Sequence[tuple], tokenizer: Tokenizer) -> list[int]:
    """``[HOI] h action o [SEP] ...`` for (h_class, o_class, action, confidence) name tuples.

    Triples are ordered by descending confidence, then by their tag text.
    """
    ordered = sorted(triples, key=lambda t: (-float(t[3]), f"{t[0]} {t[2]} {t[1]}"))
    ids = [HOI_ID]
    for h, o, action, _ in ordered:
        for name in (h, action, o):
            tid = tokenizer.word_to_id.get(name, UNK_ID)
            if tid == UNK_ID or name in SPECIAL_TOKENS:
                warnings.warn(f"tag element {name!r} is not in the vocabulary; using [UNK]")
                tid = UNK_ID
            ids.append(tid)
        ids.append(SEP_ID)
    return ids


def lm_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean over non-padding positions of -log softmax(logits)[target]."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError("logits and targets must have matching leading shapes")
    keep = targets != pad_id
    if not bool(keep.any()):
        raise ValueError("all target positions are padding")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return -(picked[keep]).mean()


def causal_mask(n: int) -> torch.Tensor:
    return torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)


class CaptionDecoder(nn.Module):
    def __init__(self, config: CaptionDecoderConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_len + 1, d)
        self.layers = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_dim) for _ in range(config.n_layers)
        )
        self.head = nn.Linear(d, config.vocab_size)

    def teacher_forced_step(self, memory, prefix, memory_padding=None, prefix_padding=None):
        """Logits (B, L, V) for every prefix position; position t sees tokens <= t only."""
        B, L = prefix.shape
        if L > self.config.max_len + 1:
            raise ValueError(f"prefix length {L} exceeds max_len {self.config.max_len}")
        x = self.token_embedding(prefix) + self.position_embedding(torch.arange(L))[None]
        mask = causal_mask(L)
        for layer in self.layers:
            x, _ = layer(x, memory, self_mask=mask, self_padding=prefix_padding, memory_padding=memory_padding)
        return self.head(x)

    forward = teacher_forced_step

    def trainable_subset(self, fine_tune_all: bool = False) -> None:
        """Freeze embeddings and self-attention; cross-attention sublayers and the head stay trainable."""
        for name, p in self.named_parameters():
            if fine_tune_all:
                p.requires_grad_(True)
            else:
                p.requires_grad_(".cross_attn." in name or ".norm2." in name or name.startswith("head."))

    @torch.no_grad()
    def _next_logprobs(self, memory, memory_padding, prefixes: list[list[int]]) -> torch.Tensor:
        prefix = torch.tensor(prefixes, dtype=torch.long)
        n = prefix.shape[0]
        mem = memory.expand(n, -1, -1)
        pad = None if memory_padding is None else memory_padding.expand(n, -1)
        logits = self.teacher_forced_step(mem, prefix, pad)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1)

    @torch.no_grad()
    def generate(self, memory, config: GenerationConfig, memory_padding=None) -> list[int]:
        """Decode one caption from a (1, S, d) memory. Returns ids without [BOS]/[EOS]."""
        max_len = min(config.max_len, self.config.max_len)
        if config.mode == "greedy":
            seq = [BOS_ID]
            for _ in range(max_len):
                # argmax of the log-probabilities; first maximum wins, i.e. lowest token id
                tok = int(self._next_logprobs(memory, memory_padding, [seq])[0].argmax())
                if tok == EOS_ID:
                    break
                seq.append(tok)
            return seq[1:]
        return self._beam(memory, memory_padding, config, max_len)

    def _beam(self, memory, memory_padding, config: GenerationConfig, max_len: int) -> list[int]:
        width = config.beam_width
        alive = [([BOS_ID], 0.0)]
        finished: list[tuple[list[int], float, float]] = []

        def normalized(score, length):
            return score / (max(length, 1) ** config.length_penalty)

        for step in range(max_len):
            logp = self._next_logprobs(memory, memory_padding, [s for s, _ in alive])
            scores = torch.tensor([sc for _, sc in alive], dtype=torch.float64)[:, None] + logp
            flat = scores.flatten()
            order = torch.sort(flat, descending=True, stable=True).indices
            new_alive = []
            V = logp.shape[1]
            for idx in order.tolist():
                b, tok = divmod(idx, V)
                seq, sc = alive[b][0], float(flat[idx])
                if tok == EOS_ID:
                    finished.append((seq[1:], sc, normalized(sc, len(seq))))
                else:
                    new_alive.append((seq + [tok], sc))
                if len(new_alive) == width or len(finished) >= width:
                    break
            alive = new_alive
            if len(finished) >= width or not alive:
                break
        if not finished:
            finished = [(seq[1:], sc, normalized(sc, len(seq) - 1)) for seq, sc in alive]
        best = max(enumerate(finished), key=lambda t: (t[1][2], -t[0]))[1]
        return best[0]
