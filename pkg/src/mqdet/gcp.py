"""Gated class-scalable perceiver modules.

Each module refines one category's text token from that category's vision
queries in two cross-attention stages:

    v_bar_i = X-MHA(v_i, I)        # queries attend to the image grid
    v_hat_i = X-MHA(t_i, v_bar_i)  # the token attends to its refined queries
    t_hat_i = t_i + tanh(gate(v_hat_i)) * v_hat_i

The gate pre-activation is scaled by a per-layer learnable scalar initialized
to zero, so at construction the module is an exact identity on the tokens.
Categories are processed independently (the block-diagonal attention mask of
`build_class_attention_mask` realized as a loop), so one category's queries
cannot influence another's token, bit for bit.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .errors import ConfigurationError, ShapeError
from .layers import DTYPE, SIMILARITY_QK_SCALE, MultiHeadAttention, init_linear


def build_class_attention_mask(counts: list[int]) -> torch.Tensor:
    """Block-diagonal boolean mask [C x sum(counts)].

    Row i admits exactly the key positions of category i's queries; a category
    with count 0 contributes no columns and an all-false row (its token must
    be handled by the empty-set pass-through, never by attention).
    """
    total = sum(counts)
    mask = torch.zeros((len(counts), total), dtype=torch.bool)
    offset = 0
    for i, c in enumerate(counts):
        if c < 0:
            raise ShapeError("query counts must be >= 0")
        mask[i, offset:offset + c] = True
        offset += c
    return mask


class GCPLayer(nn.Module):
    """One gated perceiver module (inserted after one text-encoder block)."""

    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        d, heads = config.d, config.heads
        self.variant = config.gate_variant
        # Both cross-attentions start as similarity matchers (identity Q/K/V/O):
        # stage 1 then gathers, for each exemplar query, the grid cells whose
        # features resemble it, and stage 2 blends that gathered evidence into
        # v_hat. The gate (trained fast) decides how much of it to trust, so
        # the module is useful even while the projections themselves move
        # slowly under the small module learning rate.
        self.xmha_vi = MultiHeadAttention(d, heads, gen, qk_scale=SIMILARITY_QK_SCALE,
                                          similarity_init=True)
        self.xmha_tv = MultiHeadAttention(d, heads, gen, qk_scale=SIMILARITY_QK_SCALE,
                                          similarity_init=True)
        if self.variant in ("mlp", "mlp_concat"):
            in_dim = 2 * d if self.variant == "mlp_concat" else d
            self.gate_mlp = nn.ModuleList([
                init_linear(in_dim, d // 2, gen),
                init_linear(d // 2, d // 4, gen),
                init_linear(d // 4, 1, gen),
            ])
        elif self.variant == "linear":
            self.gate_linear = init_linear(d, 1, gen)
        self.gate_scalar = nn.Parameter(torch.zeros((), dtype=DTYPE))

    def gate_value(self, v_hat: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Scalar gate in (-1, 1); exactly 0 whenever gate_scalar is 0."""
        if self.variant == "scalar_only":
            pre = torch.ones((), dtype=v_hat.dtype)
        elif self.variant == "linear":
            pre = self.gate_linear(v_hat).squeeze(-1)
        else:
            x = torch.cat([v_hat, t], dim=-1) if self.variant == "mlp_concat" else v_hat
            x = torch.relu(self.gate_mlp[0](x))
            x = torch.relu(self.gate_mlp[1](x))
            pre = self.gate_mlp[2](x).squeeze(-1)
        return torch.tanh(self.gate_scalar * pre)

    def forward(self, tokens: torch.Tensor, queries: list[torch.Tensor | None],
                image_grid: torch.Tensor) -> torch.Tensor:
        """tokens [C x d], queries: per-category [k_i x d] or None (empty set)."""
        if tokens.ndim != 2 or len(queries) != tokens.shape[0]:
            raise ShapeError("need one query set (or None) per token row")
        rows = []
        for i, v in enumerate(queries):
            t_i = tokens[i]
            if v is None or v.shape[0] == 0:
                rows.append(t_i)  # empty-set marker: exact pass-through
                continue
            v_bar = self.xmha_vi(v, image_grid)               # [k_i x d]
            v_hat = self.xmha_tv(t_i.unsqueeze(0), v_bar)[0]  # [d]
            g = self.gate_value(v_hat, t_i)
            rows.append(t_i + g * v_hat)
        return torch.stack(rows, dim=0)


class GCPStack(nn.Module):
    """GCP layers keyed by the text-encoder block index they follow, plus the
    trainable copy of the [MASK] embedding (trained at lr_gcp with the rest
    of the stack; the detector's own copy stays frozen)."""

    def __init__(self, config: ModelConfig, gen: torch.Generator,
                 mask_embed_init: torch.Tensor):
        super().__init__()
        if not config.gcp_layers:
            raise ConfigurationError("GCP stack needs at least one layer index")
        self.layer_indices = tuple(sorted(config.gcp_layers))
        for i in self.layer_indices:
            self.add_module(f"layer{i}", GCPLayer(config, gen))
        self.mask_embed = nn.Parameter(mask_embed_init.detach().clone())

    def layer_for(self, block_index: int) -> GCPLayer:
        return self.get_submodule(f"layer{block_index}")

    def gate_scalars(self) -> torch.Tensor:
        return torch.stack([self.layer_for(i).gate_scalar for i in self.layer_indices])
