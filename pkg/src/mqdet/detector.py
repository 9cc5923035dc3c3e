"""Miniature language-queried detector with parallel image/text encoders.

Image path: linear patch embedding over non-overlapping patches -> a small
pre-LN transformer -> an [N_regions x d] grid. Text path: one embedding per
unique text *name* (shared by every vocab entry using that name) -> pre-LN
transformer over the |C| prompt tokens, with GCP modules optionally replacing
the tokens after configured blocks. Classification logits are the plain dot
products R @ T^T; boxes are decoded from per-cell offsets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import (ArgumentError, ConfigurationError, ShapeError,
                     VocabularyError)
from .gcp import GCPStack
from .layers import DTYPE, EMBED_STD, TransformerBlock, init_linear


@dataclass
class ImageFeatures:
    grid: torch.Tensor  # [N_regions x d]

    @property
    def n_regions(self) -> int:
        return self.grid.shape[0]


@dataclass
class TokenFeatures:
    tokens: torch.Tensor  # [|C| x d]
    mask_flags: tuple[bool, ...]


@dataclass
class RegionOutputs:
    region_features: torch.Tensor  # [N x d]
    boxes: torch.Tensor            # [N x 4], clipped to image bounds
    raw_boxes: torch.Tensor        # [N x 4], before clipping (kept for the loss)


@dataclass
class SimilarityLogits:
    logits: torch.Tensor  # [N x |C|]


@dataclass
class MultiModalQuery:
    """One category's query: text label, optional vision features, mask flag."""

    label: str
    vision: Optional[np.ndarray] = None  # [k_i x d] float32/float64
    masked: bool = False


@dataclass
class DetectionResult:
    label: str
    box: np.ndarray  # [4] (x1, y1, x2, y2) pixels
    score: float
    query_index: int
    region_index: int
    feature: Optional[np.ndarray] = None  # filled on demand for online updates


def patchify(image: torch.Tensor, grid_size: int, patch_size: int) -> torch.Tensor:
    """(..., H, W, 3) -> (..., N, 3*p*p) rows of flattened non-overlapping
    patches in row-major order."""
    g, p = grid_size, patch_size
    lead = image.shape[:-3]
    x = image.reshape(*lead, g, p, g, p, 3)
    x = x.permute(*range(len(lead)), -5, -3, -4, -2, -1)
    return x.reshape(*lead, g * g, p * p * 3)


class ImageEncoder(nn.Module):
    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.patch_size = config.patch_size
        self.grid_size = config.grid_size
        in_dim = 3 * config.patch_size ** 2
        self.patch_embed = init_linear(in_dim, config.d, gen)
        # Learned per-cell position embedding. Without it the blocks are
        # permutation-equivariant over cells, so a uniform patch deep inside a
        # large shape could never learn which boundary it belongs to.
        self.pos_embed = nn.Parameter(
            torch.empty((config.n_regions, config.d), dtype=DTYPE).normal_(
                0.0, EMBED_STD, generator=gen))
        self.n_blocks = config.image_layers
        for i in range(self.n_blocks):
            self.add_module(f"block{i}", TransformerBlock(config.d, config.heads, gen))
        self.ln = nn.LayerNorm(config.d, dtype=DTYPE)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # image: (..., H, W, 3) -> (..., N, d); row-major patch order
        x = self.patch_embed(patchify(image, self.grid_size, self.patch_size))
        x = x + self.pos_embed
        for i in range(self.n_blocks):
            x = self.get_submodule(f"block{i}")(x)
        return self.ln(x)


class TextEncoder(nn.Module):
    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        names = config.text_names
        self.name_index = {n: i for i, n in enumerate(names)}
        self.embed = nn.Parameter(
            torch.empty((len(names), config.d), dtype=DTYPE).normal_(0.0, EMBED_STD, generator=gen))
        self.mask_embed = nn.Parameter(
            torch.empty((config.d,), dtype=DTYPE).normal_(0.0, EMBED_STD, generator=gen))
        self.n_blocks = config.text_layers
        for i in range(self.n_blocks):
            self.add_module(f"block{i}", TransformerBlock(config.d, config.heads, gen))
        self.ln = nn.LayerNorm(config.d, dtype=DTYPE)


class DetectionHead(nn.Module):
    """R = H(I): a residual two-layer MLP on grid features, plus a linear box
    regressor emitting (dx, dy, dw, dh) offsets from each cell's center.

    The residual keeps region features anchored to the encoder grid, so dot
    products against features pooled from that same grid (the vision-query
    bank) stay meaningful rather than passing through an arbitrary learned
    rotation."""

    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = config.d
        self.fc1 = init_linear(d, 2 * d, gen)
        self.fc2 = init_linear(2 * d, d, gen)
        self.box = init_linear(d, 4, gen)

    def forward(self, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        r = grid + self.fc2(torch.relu(self.fc1(grid)))
        return r, self.box(r)


def cell_centers(config: ModelConfig) -> torch.Tensor:
    """[N x 2] (cx, cy) pixel centers of the grid cells, row-major."""
    g, p = config.grid_size, config.patch_size
    ys, xs = torch.meshgrid(torch.arange(g, dtype=DTYPE), torch.arange(g, dtype=DTYPE),
                            indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * p
    cy = (ys.reshape(-1) + 0.5) * p
    return torch.stack([cx, cy], dim=-1)


def decode_boxes(offsets: torch.Tensor, config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Offsets [N x 4] -> (raw boxes, clipped boxes). Zero offsets give each
    cell's default box: the cell-centered square of side patch_size."""
    p = float(config.patch_size)
    centers = cell_centers(config)
    cx = centers[:, 0] + offsets[:, 0] * p
    cy = centers[:, 1] + offsets[:, 1] * p
    w = p * torch.exp(offsets[:, 2])
    h = p * torch.exp(offsets[:, 3])
    raw = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)
    clipped = raw.clamp(0.0, float(config.image_size))
    return raw, clipped


class MultiModalDetector(nn.Module):
    """The full model: frozen-able detector + optional GCP stack ("gcp.*")."""

    def __init__(self, config: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.config = config
        self.image = ImageEncoder(config, gen)
        self.text = TextEncoder(config, gen)
        self.head = DetectionHead(config, gen)
        self.gcp: Optional[GCPStack] = None

    # -- construction -----------------------------------------------------

    def attach_gcp(self, seed: int, gate_variant: Optional[str] = None) -> None:
        cfg = self.config
        if gate_variant is not None and gate_variant != cfg.gate_variant:
            import dataclasses
            cfg = dataclasses.replace(cfg, gate_variant=gate_variant)
            self.config = cfg
        gen = torch.Generator().manual_seed(seed)
        self.gcp = GCPStack(cfg, gen, self.text.mask_embed.detach())

    # -- encoders ----------------------------------------------------------

    def encode_image(self, image) -> ImageFeatures:
        x = torch.as_tensor(np.asarray(image), dtype=DTYPE)
        s = self.config.image_size
        if x.shape != (s, s, 3):
            raise ConfigurationError(f"expected image of shape ({s},{s},3), got {tuple(x.shape)}")
        return ImageFeatures(grid=self.image(x))

    def encode_image_batch(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=DTYPE)
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ConfigurationError("expected a [B, H, W, 3] image batch")
        return self.image(x)

    def _token_rows(self, labels: Sequence[str], mask_flags: Sequence[bool],
                    mask_embed: torch.Tensor) -> torch.Tensor:
        rows = []
        for lab, flag in zip(labels, mask_flags):
            if flag:
                rows.append(mask_embed)
            else:
                entry = self.config.entry(lab)  # raises VocabularyError
                rows.append(self.text.embed[self.text.name_index[entry.text_name]])
        return torch.stack(rows, dim=0)

    def encode_text(self, labels: Sequence[str],
                    mask_flags: Optional[Sequence[bool]] = None,
                    queries: Optional[Sequence[Optional[torch.Tensor]]] = None,
                    image_features: Optional[ImageFeatures] = None) -> TokenFeatures:
        """Encode category labels into token features.

        `queries` is the per-category vision-query list (None entries mark
        empty sets). When it is given at all, the GCP stack must be attached
        and `image_features` supplied; tokens are replaced by the GCP output
        after every block listed in config.gcp_layers. When it is absent the
        plain frozen encoder runs, GCP or not.
        """
        if mask_flags is None:
            mask_flags = [False] * len(labels)
        if len(mask_flags) != len(labels):
            raise ShapeError("mask_flags length must equal the number of labels")
        use_gcp = queries is not None
        if use_gcp:
            if self.gcp is None:
                raise ConfigurationError("vision queries given but model has no GCP stack")
            if image_features is None:
                raise ArgumentError("GCP needs image features")
            if len(queries) != len(labels):
                raise ShapeError("need one query set (or None) per label")
        mask_embed = self.gcp.mask_embed if (use_gcp and self.gcp is not None) else self.text.mask_embed
        x = self._token_rows(labels, mask_flags, mask_embed)
        for i in range(self.text.n_blocks):
            x = self.text.get_submodule(f"block{i}")(x)
            if use_gcp and i in self.gcp.layer_indices:
                x = self.gcp.layer_for(i)(x, list(queries), image_features.grid)
        return TokenFeatures(tokens=self.text.ln(x), mask_flags=tuple(bool(f) for f in mask_flags))

    # -- heads and losses ---------------------------------------------------

    def region_head(self, feats: ImageFeatures) -> RegionOutputs:
        r, offsets = self.head(feats.grid)
        raw, clipped = decode_boxes(offsets, self.config)
        return RegionOutputs(region_features=r, boxes=clipped, raw_boxes=raw)

    def detect(self, image, queries: Sequence[MultiModalQuery],
               score_threshold: float = 0.05, nms_iou: float = 0.5) -> list[DetectionResult]:
        if not queries:
            raise ArgumentError("detect requires at least one query")
        with torch.no_grad():
            feats = self.encode_image(image)
            vision = [None if q.vision is None else torch.as_tensor(np.asarray(q.vision), dtype=DTYPE)
                      for q in queries]
            labels = [q.label for q in queries]
            flags = [q.masked for q in queries]
            if any(v is not None for v in vision):
                tokens = self.encode_text(labels, flags, queries=vision, image_features=feats)
            else:
                tokens = self.encode_text(labels, flags)
            regions = self.region_head(feats)
            logits = region_word_logits(regions, tokens).logits
            scores = torch.sigmoid(logits)  # [N x C]

        boxes_np = regions.boxes.numpy()
        out: list[DetectionResult] = []
        for c in range(len(queries)):
            col = scores[:, c].numpy()
            keep = nms_per_class(boxes_np, col, score_threshold, nms_iou)
            for n in keep:
                out.append(DetectionResult(label=labels[c], box=boxes_np[n].copy(),
                                           score=float(col[n]), query_index=c, region_index=int(n)))
        out.sort(key=lambda r: (-r.score, r.query_index, r.region_index))
        return out


def region_word_logits(regions: RegionOutputs, tokens: TokenFeatures) -> SimilarityLogits:
    r, t = regions.region_features, tokens.tokens
    if r.shape[-1] != t.shape[-1]:
        raise ShapeError("region and token feature dimensions differ")
    return SimilarityLogits(logits=r @ t.T)


def assign_targets(gt_boxes: torch.Tensor, gt_class_idx: Sequence[int], n_classes: int,
                   config: ModelConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Center-in-box assignment on the fixed region grid.

    Returns (assignment [N] long, gt index or -1 for background;
             class targets [N x n_classes] in {0,1};
             matched gt boxes [N x 4], zeros for background rows).
    A region is positive for the gt whose box contains the region's cell
    center (boundaries inclusive); ties go to the smallest-area gt, then to
    the lowest gt index. Instances with class index < 0 are treated as
    un-queried: they still occupy cells but contribute no class target.
    """
    centers = cell_centers(config)
    n = centers.shape[0]
    assignment = torch.full((n,), -1, dtype=torch.long)
    targets = torch.zeros((n, n_classes), dtype=DTYPE)
    matched = torch.zeros((n, 4), dtype=DTYPE)
    if gt_boxes.numel() == 0:
        return assignment, targets, matched
    boxes = torch.as_tensor(gt_boxes, dtype=DTYPE).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for r in range(n):
        cx, cy = centers[r, 0], centers[r, 1]
        best = -1
        for g in range(boxes.shape[0]):
            if boxes[g, 0] <= cx <= boxes[g, 2] and boxes[g, 1] <= cy <= boxes[g, 3]:
                if best < 0 or areas[g] < areas[best]:
                    best = g
        if best >= 0:
            assignment[r] = best
            matched[r] = boxes[best]
            ci = gt_class_idx[best]
            if ci >= 0:
                targets[r, ci] = 1.0
    return assignment, targets, matched


def grounding_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on sigmoid(logits) over all region x category
    cells. Masked categories keep their targets: their logits must still be
    predicted, through vision cues when the text token is [MASK]."""
    if logits.shape != targets.shape:
        raise ShapeError("logits/targets shape mismatch")
    return nn.functional.binary_cross_entropy_with_logits(logits, targets)


def localization_loss(raw_boxes: torch.Tensor, assignment: torch.Tensor,
                      matched_boxes: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Mean L1 between predicted and matched gt box coordinates over positive
    regions, measured in units of patch_size. Uses the un-clipped boxes so the
    regressor always receives gradient. 0 when there are no positives."""
    pos = assignment >= 0
    if not bool(pos.any()):
        return torch.zeros((), dtype=raw_boxes.dtype)
    diff = (raw_boxes[pos] - matched_boxes[pos]).abs() / float(config.patch_size)
    return diff.mean()


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    x1 = max(a[0], b[0]); y1 = max(a[1], b[1])
    x2 = min(a[2], b[2]); y2 = min(a[3], b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_per_class(boxes: np.ndarray, scores: np.ndarray, score_threshold: float,
                  nms_iou: float) -> list[int]:
    """Greedy NMS for one class: keep by descending score (ties by lower
    region index), suppress boxes with IoU strictly above nms_iou."""
    cand = [i for i in range(len(scores)) if scores[i] >= score_threshold]
    cand.sort(key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in cand:
        if all(box_iou(boxes[i], boxes[j]) <= nms_iou for j in keep):
            keep.append(i)
    return keep


def build_model(config: ModelConfig, seed: int, with_gcp: bool = False,
                gcp_seed: Optional[int] = None) -> MultiModalDetector:
    gen = torch.Generator().manual_seed(seed)
    model = MultiModalDetector(config, gen)
    if with_gcp:
        model.attach_gcp(seed if gcp_seed is None else gcp_seed)
    return model
