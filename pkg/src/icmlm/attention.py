"""Transformer encoder layer built from scratch, plus a stable masked log-sum-exp.

Each attention head projects the full model width (keys, queries and values
are all d_model wide); head outputs are concatenated and mixed by a linear
layer. The layer epilogue is residual add, dropout, LayerNorm, ReLU and a
final linear map.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def masked_logsumexp(scores: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """log(sum(exp(scores))) over dim with max-subtraction; mask=True keeps entries.

    Stays finite for score magnitudes far beyond float range of exp, which a
    naive sum-then-log would overflow on.
    """
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    m = scores.max(dim=dim, keepdim=True).values.detach()
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    return m.squeeze(dim) + torch.log(torch.exp(scores - m).sum(dim=dim))


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention with per-head full-width projections.

    attention_order selects softmax(Q K^T / sqrt(D)) V ("qk", conventional)
    or the transposed variant softmax(K Q^T / sqrt(D)) V ("kq").
    """

    def __init__(self, d_model: int, n_heads: int, attention_order: str = "qk"):
        super().__init__()
        if attention_order not in ("qk", "kq"):
            raise ValueError("attention_order must be 'qk' or 'kq'")
        self.d_model = d_model
        self.n_heads = n_heads
        self.attention_order = attention_order
        self.key_proj = nn.Linear(d_model, n_heads * d_model)
        self.query_proj = nn.Linear(d_model, n_heads * d_model)
        self.value_proj = nn.Linear(d_model, n_heads * d_model)
        self.out_proj = nn.Linear(n_heads * d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.n_heads, self.d_model).transpose(1, 2)  # (B, H, S, d)

    def forward(self, z: torch.Tensor, key_mask: torch.Tensor | None = None):
        """key_mask: (B, S) bool, True where the position is real (not padding)."""
        k = self._split(self.key_proj(z))
        q = self._split(self.query_proj(z))
        v = self._split(self.value_proj(z))
        if self.attention_order == "qk":
            scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_model)  # (B, H, S, S)
        else:
            scores = k @ q.transpose(-2, -1) / math.sqrt(self.d_model)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v  # (B, H, S, d)
        b, _, s, _ = out.shape
        out = out.transpose(1, 2).reshape(b, s, self.n_heads * self.d_model)
        return self.out_proj(out), attn


class TransformerEncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.1, attention_order: str = "qk"):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d_model, n_heads, attention_order)
        self.dropout = dropout
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, z: torch.Tensor, key_mask: torch.Tensor | None = None, need_attn: bool = False):
        h, attn = self.attn(z, key_mask)
        h = z + h
        h = F.dropout(h, p=self.dropout, training=self.training)
        h = F.relu(self.norm(h))
        h = self.out(h)
        return (h, attn) if need_attn else (h, None)
