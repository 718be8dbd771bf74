"""Fusion heads over visual grids and token features: tag prediction,
transformer fusion, and attention pooling with a vocabulary classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import TransformerEncoderLayer, masked_logsumexp
from .common import ContractViolation
from .textenc import Vocabulary


@dataclass
class AttentionMap:
    p: torch.Tensor  # (H, W) probabilities over the visual grid
    image_id: str
    caption_id: str
    mask_index: int


def _length_mask(lengths: torch.Tensor, t_max: int) -> torch.Tensor:
    return torch.arange(t_max, device=lengths.device)[None] < lengths[:, None]


class TpHead(nn.Module):
    """Small conv stack + global average pooling + linear tag classifier."""

    def __init__(self, d_x: int, k: int, width: int | None = None, n_layers: int = 4):
        super().__init__()
        width = width or d_x
        layers = []
        chans = d_x
        for _ in range(n_layers):
            layers += [nn.Conv2d(chans, width, 3, padding=1), nn.GroupNorm(1, width, eps=1e-5), nn.ReLU()]
            chans = width
        self.trunk = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, k)
        self.k = k

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, d_x, H, W) feature grid -> (B, K) tag logits."""
        h = self.trunk(grid).mean(dim=(2, 3))
        return self.classifier(h)


class AttFcHead(nn.Module):
    """Cross-modal attention pooling plus a vocabulary classifier on the pooled
    visual feature. The prediction sees the image only; the caption steers it
    exclusively through the attention weights.
    """

    def __init__(self, d_x: int, d_w: int, vocab: Vocabulary, d_z: int = 64,
                 n_heads: int = 12, fc_hidden: int = 128, fc_layers: int = 1):
        super().__init__()
        self.vocab = vocab
        self.d_x, self.d_w, self.d_z, self.n_heads = d_x, d_w, d_z, n_heads
        self.sigma_x = nn.Parameter(torch.empty(n_heads, d_x, d_z))
        self.sigma_w = nn.Parameter(torch.empty(n_heads, d_w, d_z))
        for h in range(n_heads):
            nn.init.xavier_uniform_(self.sigma_x[h])
            nn.init.xavier_uniform_(self.sigma_w[h])
        self.ln_x_weight = nn.Parameter(torch.ones(n_heads, d_z))
        self.ln_x_bias = nn.Parameter(torch.zeros(n_heads, d_z))
        self.ln_w_weight = nn.Parameter(torch.ones(n_heads, d_z))
        self.ln_w_bias = nn.Parameter(torch.zeros(n_heads, d_z))
        # head averaging starts at unit weights: one head reduces exactly to
        # the single-head path, and the summed scale keeps the cell softmax
        # from starting near-uniform
        self.head_weights = nn.Parameter(torch.ones(n_heads))
        self.head_bias = nn.Parameter(torch.zeros(()))
        fc = []
        chans = d_x
        for _ in range(fc_layers):
            fc += [nn.Linear(chans, fc_hidden), nn.LayerNorm(fc_hidden), nn.ReLU()]
            chans = fc_hidden
        fc.append(nn.Linear(chans, d_w))
        self.fc = nn.Sequential(*fc)

    def _project(self, x: torch.Tensor, sigma: torch.Tensor, weight, bias) -> torch.Tensor:
        # x: (B, N, d_in) -> (B, H, N, d_z), per-head LayerNorm over d_z, then ReLU
        proj = torch.einsum("bnd,hdz->bhnz", x, sigma)
        mean = proj.mean(dim=-1, keepdim=True)
        var = proj.var(dim=-1, keepdim=True, unbiased=False)
        normed = (proj - mean) / torch.sqrt(var + 1e-5)
        normed = normed * weight[None, :, None, :] + bias[None, :, None, :]
        return torch.relu(normed)

    def att_scores(self, X: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
        """(B, N, d_x) x (B, T, d_w) -> per-head scores (B, H, N, T)."""
        if X.shape[-1] != self.d_x or W.shape[-1] != self.d_w:
            raise ContractViolation(
                f"expected widths d_x={self.d_x}, d_w={self.d_w}; got {X.shape[-1]}, {W.shape[-1]}"
            )
        xt = self._project(X, self.sigma_x, self.ln_x_weight, self.ln_x_bias)
        wt = self._project(W, self.sigma_w, self.ln_w_weight, self.ln_w_bias)
        return xt @ wt.transpose(-2, -1) / math.sqrt(self.d_z)

    def att_pool(self, S: torch.Tensor, X: torch.Tensor, lengths: torch.Tensor | None = None):
        """Soft-max over tokens per cell, head averaging, softmax pooling of X.

        Returns (x_hat (B, d_x), p_att (B, N), s_combined (B, N)).
        """
        mask = None
        if lengths is not None:
            mask = _length_mask(lengths, S.shape[-1])[:, None, None, :]
        s = masked_logsumexp(S, dim=-1, mask=mask)  # (B, H, N)
        combined = torch.einsum("bhn,h->bn", s, self.head_weights) + self.head_bias
        p_att = torch.softmax(combined, dim=-1)
        x_hat = torch.einsum("bnd,bn->bd", X, p_att)
        return x_hat, p_att, combined

    def fc_features(self, x_hat: torch.Tensor) -> torch.Tensor:
        return self.fc(x_hat)

    def fc_classify(self, x_hat: torch.Tensor) -> torch.Tensor:
        """Probabilities over the vocabulary for pooled visual features."""
        return torch.softmax(self.vocab.logits(self.fc_features(x_hat)), dim=-1)

    def forward(self, X: torch.Tensor, W: torch.Tensor, lengths: torch.Tensor | None = None):
        """Returns (log_probs (B, |V|), p_att (B, N))."""
        S = self.att_scores(X, W)
        x_hat, p_att, _ = self.att_pool(S, X, lengths)
        log_probs = torch.log_softmax(self.vocab.logits(self.fc_features(x_hat)), dim=-1)
        return log_probs, p_att

    def attention_probs(self, X, W, lengths=None, mask_indices=None):
        with torch.no_grad():
            _, p_att = self.forward(X, W, lengths)
        return p_att


class TfmHead(nn.Module):
    """Transformer fusion: visual tokens projected into the token embedding
    space, concatenated with text features, encoded, and the masked position's
    output scored against the vocabulary."""

    def __init__(self, d_x: int, d_w: int, vocab: Vocabulary, grid_cells: int,
                 n_heads: int = 12, n_layers: int = 1, dropout: float = 0.1,
                 visual_pos_embed: bool = True, attention_order: str = "qk"):
        super().__init__()
        self.vocab = vocab
        self.grid_cells = grid_cells
        self.vis_proj = nn.Linear(d_x, d_w)
        self.visual_pos_embed = visual_pos_embed
        self.pos = nn.Parameter(torch.randn(grid_cells, d_w) * 0.02)
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(d_w, n_heads, dropout, attention_order)
            for _ in range(n_layers)
        )

    def encode(self, X: torch.Tensor, W: torch.Tensor, lengths: torch.Tensor | None = None,
               need_attn: bool = False):
        if X.shape[1] != self.grid_cells:
            raise ContractViolation(f"expected {self.grid_cells} visual tokens, got {X.shape[1]}")
        xb = self.vis_proj(X)
        if self.visual_pos_embed:
            xb = xb + self.pos[None]
        z = torch.cat([xb, W], dim=1)  # (B, N + T, d_w)
        if lengths is None:
            key_mask = None
        else:
            visual = torch.ones(X.shape[0], self.grid_cells, dtype=torch.bool, device=X.device)
            key_mask = torch.cat([visual, _length_mask(lengths, W.shape[1])], dim=1)
        attn = None
        for layer in self.layers:
            z, attn = layer(z, key_mask, need_attn=need_attn)
        return z, attn

    def forward(self, X: torch.Tensor, W: torch.Tensor, mask_indices: torch.Tensor,
                lengths: torch.Tensor | None = None, need_attn: bool = False):
        """Returns (log_probs (B, |V|), attn or None). mask_indices are token
        positions within each caption (visual offset applied internally)."""
        if lengths is not None and bool((mask_indices >= lengths).any()):
            raise ContractViolation("mask_index out of range for caption length")
        if bool((mask_indices >= W.shape[1]).any()):
            raise ContractViolation("mask_index out of range for caption length")
        z, attn = self.encode(X, W, lengths, need_attn=need_attn)
        rows = self.grid_cells + mask_indices
        feat = z[torch.arange(z.shape[0]), rows]
        log_probs = torch.log_softmax(self.vocab.logits(feat), dim=-1)
        return log_probs, attn

    def attention_probs(self, X, W, lengths=None, mask_indices=None):
        """Masked-token attention over visual cells, averaged across heads and
        renormalized over the grid."""
        with torch.no_grad():
            _, attn = self.forward(X, W, mask_indices, lengths, need_attn=True)
        rows = self.grid_cells + mask_indices
        per_head = attn[torch.arange(attn.shape[0]), :, rows, : self.grid_cells]  # (B, H, N)
        mean = per_head.mean(dim=1)
        return mean / mean.sum(dim=-1, keepdim=True).clamp_min(1e-12)


def extract_attention(head, X, W, lengths, mask_indices, grid_hw, triples) -> list[AttentionMap]:
    """Attention maps for a batch of (image, caption, mask) triples."""
    with torch.no_grad():
        p = head.attention_probs(X, W, lengths=lengths, mask_indices=mask_indices)
    gh, gw = grid_hw
    return [
        AttentionMap(p=p[b].reshape(gh, gw), image_id=t[0], caption_id=t[1], mask_index=int(t[2]))
        for b, t in enumerate(triples)
    ]
