"""Transformer building blocks, fp64 throughout, deterministically initialized.

All randomness flows through an explicit torch.Generator so that two models
built from the same seed are bitwise identical. Attention is written from
plain linear projections (no fused kernels) so a pure-loop re-implementation
can match it to machine precision.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import EmptyAttentionError, ShapeError

DTYPE = torch.float64

# Scale of the identity Q/K init used by similarity-matching attention (see
# MultiHeadAttention(similarity_init=True)); everything else uses fan-in
# scaling.
SIMILARITY_QK_SCALE = 1.0
EMBED_STD = 0.5


def init_linear(in_features: int, out_features: int, gen: torch.Generator, std: float | None = None) -> nn.Linear:
    lin = nn.Linear(in_features, out_features, dtype=DTYPE)
    if std is None:
        std = 1.0 / math.sqrt(in_features)
    with torch.no_grad():
        lin.weight.normal_(0.0, std, generator=gen)
        lin.bias.zero_()
    return lin


class MultiHeadAttention(nn.Module):
    """Multi-head scaled-dot-product attention. No FFN, no normalization.

    With `similarity_init` the projections start as scaled identities
    (Q = K = qk_scale*I, V = O = I): attention logits are then proportional to
    raw feature dot products and the output is a plain attention-weighted blend
    of the key/value rows. A module initialized this way gathers the rows most
    similar to each query before any training, which matters when it is
    trained with a very small learning rate.
    """

    def __init__(self, d: int, heads: int, gen: torch.Generator, qk_scale: float = 1.0,
                 similarity_init: bool = False):
        super().__init__()
        if d % heads != 0:
            raise ShapeError("d must be divisible by heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        std = 1.0 / math.sqrt(d)
        self.wq = init_linear(d, d, gen, std=qk_scale * std)
        self.wk = init_linear(d, d, gen, std=qk_scale * std)
        self.wv = init_linear(d, d, gen, std=std)
        self.wo = init_linear(d, d, gen, std=std)
        if similarity_init:
            with torch.no_grad():
                eye = torch.eye(d, dtype=DTYPE)
                self.wq.weight.copy_(qk_scale * eye)
                self.wk.weight.copy_(qk_scale * eye)
                self.wv.weight.copy_(eye)
                self.wo.weight.copy_(eye)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        # queries: (..., m, d), keys_values: (..., n, d), mask: (m, n) bool
        if queries.shape[-1] != self.d or keys_values.shape[-1] != self.d:
            raise ShapeError(f"expected feature dim {self.d}")
        if mask is not None:
            if mask.shape != (queries.shape[-2], keys_values.shape[-2]):
                raise ShapeError("mask must be [m, n]")
            if not bool(mask.any(dim=-1).all()):
                raise EmptyAttentionError("attention mask admits no keys for some query row")

        m, n = queries.shape[-2], keys_values.shape[-2]
        lead = queries.shape[:-2]
        q = self.wq(queries).reshape(*lead, m, self.heads, self.d_head).transpose(-3, -2)
        k = self.wk(keys_values).reshape(*lead, n, self.heads, self.d_head).transpose(-3, -2)
        v = self.wv(keys_values).reshape(*lead, n, self.heads, self.d_head).transpose(-3, -2)

        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)  # (..., H, m, n)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = attn @ v  # (..., H, m, d_head)
        out = out.transpose(-3, -2).reshape(*lead, m, self.d)
        return self.wo(out)


class TransformerBlock(nn.Module):
    """Pre-LN self-attention block: x += MHA(LN(x)); x += FFN(LN(x))."""

    def __init__(self, d: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.attn = MultiHeadAttention(d, heads, gen)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc1 = init_linear(d, 2 * d, gen)
        self.fc2 = init_linear(2 * d, d, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        x = x + self.fc2(torch.relu(self.fc1(self.ln2(x))))
        return x
