"""Pluggable text encoders.

The built-in "tiny" encoder is a small from-scratch transformer meant for
CPU-scale experiments and numerical verification; anything exposing the same
``forward(ids, mask) -> EncoderOutput`` contract (and per-layer attention
tensors for the entropy-regularization baseline) can be registered instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenization import Vocab


@dataclass
class EncoderOutput:
    """Contextualized representations plus validity mask.

    ``H`` is (batch, m, d); ``attention_mask`` is (batch, m) with False on
    padding rows, which must be excluded from any pooling. ``attentions`` is
    one (batch, heads, m, m) tensor per layer, rows normalized over keys.
    """

    H: torch.Tensor
    attention_mask: torch.Tensor
    attentions: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.H.dim() != 3:
            raise ValueError(f"H must be (batch, m, d), got {tuple(self.H.shape)}")
        if self.attention_mask.shape != self.H.shape[:2]:
            raise ValueError("attention_mask must match H's (batch, m)")


@dataclass
class EncoderConfig:
    name: str = "tiny"
    d: int = 64
    layers: int = 2
    heads: int = 2
    ffn_dim: int | None = None  # defaults to 4*d
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.d


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, m, d = x.shape
        def split(t):
            return t.view(B, m, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        key_mask = mask[:, None, None, :]  # padding keys are invisible
        scores = scores.masked_fill(~key_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = self.dropout(attn) @ v
        ctx = ctx.transpose(1, 2).reshape(B, m, d)
        return self.out(ctx), attn


class TransformerLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg.d, cfg.heads, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.ffn_in = nn.Linear(cfg.d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, attn = self.attention(x, mask)
        x = self.norm1(x + self.dropout(attn_out))
        ffn = self.ffn_out(F.gelu(self.ffn_in(x)))
        x = self.norm2(x + self.dropout(ffn))
        return x, attn


class TinyTransformerEncoder(nn.Module):
    """Post-LN transformer encoder trained from scratch."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(vocab_size, cfg.d)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d)
        self.emb_norm = nn.LayerNorm(cfg.d)
        self.emb_dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.layers))

    @property
    def d(self) -> int:
        return self.cfg.d

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> EncoderOutput:
        if ids.size(1) > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.size(1)} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(ids.size(1), device=ids.device).unsqueeze(0)
        x = self.token_emb(ids) + self.pos_emb(positions)
        x = self.emb_dropout(self.emb_norm(x))
        attentions = []
        for layer in self.layers:
            x, attn = layer(x, mask)
            attentions.append(attn)
        return EncoderOutput(H=x, attention_mask=mask, attentions=attentions)


EncoderBuilder = Callable[[int, EncoderConfig], nn.Module]

_ENCODERS: dict[str, EncoderBuilder] = {}


def register_encoder(name: str, builder: EncoderBuilder) -> None:
    _ENCODERS[name] = builder


def build_encoder(vocab: Vocab, cfg: EncoderConfig) -> nn.Module:
    try:
        builder = _ENCODERS[cfg.name]
    except KeyError:
        raise ValueError(
            f"unknown encoder {cfg.name!r}; registered: {sorted(_ENCODERS)}") from None
    return builder(len(vocab), cfg)


register_encoder("tiny", TinyTransformerEncoder)
