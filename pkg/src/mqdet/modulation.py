"""Training: baseline pretraining, modulated pre-training, partial tuning.

`pretrain_baseline` mints the frozen detector: it trains the whole model with
text-only prompts over unique text *names* (ambiguous entries share a name, so
the baseline is genuinely unable to tell them apart — that is the benchmark's
premise, not a bug).

`modulate` then freezes the detector and trains only "gcp."-prefixed
parameters on entry-level prompts: per step it samples k vision queries per
category from the bank, masks present categories' text tokens with probability
mask_rate (per image), and optimizes grounding + localization. Masked
categories keep their targets, which is what forces prediction through the
vision pathway. `partial_finetune` is the same loop over the few-shot split.
"""

from __future__ import annotations

import json
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .bank import VisionQueryBank, covered_cells
from .config import ModelConfig, PretrainConfig, TrainConfig
from .detector import (ImageFeatures, MultiModalDetector, assign_targets,
                       grounding_loss, localization_loss, region_word_logits)
from .errors import ArgumentError, ConfigurationError
from .layers import DTYPE
from .synth import SceneDataset, SceneRecord, split_entry_ids


def mask_present_categories(labels: Sequence[str], present: set[str], rate: float,
                            rng: np.random.Generator) -> list[bool]:
    """Per-category mask flags: each *present* category is masked independently
    with probability `rate` (one rng draw per present label, in label order);
    absent categories are never masked."""
    flags = []
    for lab in labels:
        if lab in present:
            flags.append(bool(rng.random() < rate))
        else:
            flags.append(False)
    return flags


def apply_freeze(model: MultiModalDetector, freeze: str) -> None:
    for name, p in model.named_parameters():
        if name.startswith("gcp."):
            p.requires_grad_(True)
        elif freeze == "none":
            p.requires_grad_(True)
        elif freeze == "text-encoder":
            p.requires_grad_(name.startswith("text."))
        else:  # "all"
            p.requires_grad_(False)


def gcp_optimizer(model: MultiModalDetector, cfg: TrainConfig) -> torch.optim.AdamW:
    """Two groups: gate scalars + gate network at lr_gate, everything else
    trainable (cross-attentions, mask embedding, any unfrozen detector parts)
    at lr_gcp."""
    gate, slow = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if ".gate_scalar" in name or ".gate_mlp." in name or ".gate_linear." in name:
            gate.append(p)
        else:
            slow.append(p)
    groups = []
    if slow:
        groups.append({"params": slow, "lr": cfg.lr_gcp})
    if gate:
        groups.append({"params": gate, "lr": cfg.lr_gate})
    return torch.optim.AdamW(groups, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=cfg.weight_decay)


def _scene_gt(rec: SceneRecord, class_of_entry: Callable[[int], int]) -> tuple[torch.Tensor, list[int]]:
    boxes = torch.tensor([list(i.bbox) for i in rec.instances], dtype=DTYPE).reshape(-1, 4)
    classes = [class_of_entry(i.entry_id) for i in rec.instances]
    return boxes, classes


def _image_losses(model: MultiModalDetector, grid: torch.Tensor, tokens,
                  gt_boxes: torch.Tensor, gt_classes: list[int],
                  n_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    regions = model.region_head(ImageFeatures(grid))
    logits = region_word_logits(regions, tokens).logits
    assignment, targets, matched = assign_targets(gt_boxes, gt_classes, n_classes, model.config)
    return (grounding_loss(logits, targets),
            localization_loss(regions.raw_boxes, assignment, matched, model.config))


def _run_training(model: MultiModalDetector, dataset: SceneDataset, split: str,
                  prompt_labels: list[str], class_of_entry: Callable[[int], int],
                  optimizer: torch.optim.Optimizer, rng: np.random.Generator,
                  epochs: int, batch_size: int, loc_weight: float,
                  bank: Optional[VisionQueryBank], mask_rate: float,
                  aux_loss: Optional[Callable[..., torch.Tensor]] = None,
                  ) -> list[dict]:
    """Shared SGD loop. `aux_loss(grids, image_batch, recs)` may add an extra
    already-weighted term per batch (used by the baseline's contrastive
    objective); it is logged under loss_aux."""
    torch.set_num_threads(1)
    scenes = dataset.scenes(split)
    if not scenes:
        raise ArgumentError(f"split {split!r} is empty")
    images = [dataset.load_image(r) for r in scenes]
    use_gcp = bank is not None
    k = model.config.k
    prompt_set = set(prompt_labels)
    log: list[dict] = []
    step = 0
    for _epoch in range(epochs):
        order = rng.permutation(len(scenes))
        for start in range(0, len(scenes), batch_size):
            batch = [int(i) for i in order[start:start + batch_size]]
            queries = None
            if use_gcp:
                sampled = [bank.sample_queries(lab, k, rng) for lab in prompt_labels]
                queries = [None if q is None else torch.as_tensor(q, dtype=DTYPE)
                           for q in sampled]
            image_batch = np.stack([images[i] for i in batch])
            grids = model.encode_image_batch(image_batch)
            g_total = torch.zeros((), dtype=DTYPE)
            l_total = torch.zeros((), dtype=DTYPE)
            masked = 0
            present_total = 0
            for j, idx in enumerate(batch):
                rec = scenes[idx]
                present = {dataset.entry_label(i.entry_id) for i in rec.instances} & prompt_set
                if use_gcp:
                    flags = mask_present_categories(prompt_labels, present, mask_rate, rng)
                    tokens = model.encode_text(prompt_labels, flags, queries=queries,
                                               image_features=ImageFeatures(grids[j]))
                    masked += sum(flags)
                    present_total += len(present)
                else:
                    tokens = model.encode_text(prompt_labels)
                gt_boxes, gt_classes = _scene_gt(rec, class_of_entry)
                g, l = _image_losses(model, grids[j], tokens, gt_boxes, gt_classes,
                                     len(prompt_labels))
                g_total = g_total + g
                l_total = l_total + l
            n = len(batch)
            loss = (g_total + loc_weight * l_total) / n
            aux = torch.zeros((), dtype=DTYPE)
            if aux_loss is not None:
                aux = aux_loss(grids, image_batch, [scenes[i] for i in batch])
                loss = loss + aux
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            gate_l2 = 0.0
            if model.gcp is not None:
                with torch.no_grad():
                    gate_l2 = float(torch.sqrt((model.gcp.gate_scalars() ** 2).sum()))
            log.append({
                "step": step,
                "loss_grounding": float(g_total.detach()) / n,
                "loss_loc": float(l_total.detach()) / n,
                "loss_aux": float(aux.detach()),
                "gate_scalar_l2": gate_l2,
                "masked_fraction": (masked / present_total) if present_total else 0.0,
            })
            step += 1
    return log


CALIBRATION_SCENES = 64  # images whose grid statistics center the matcher
CALIBRATION_SCALE = 2.0  # sharpness of the centered similarity logits


def center_stage1(model: MultiModalDetector, dataset: SceneDataset,
                  split: str = "pretrain", n_scenes: int = CALIBRATION_SCENES,
                  scale: float = CALIBRATION_SCALE) -> torch.Tensor:
    """Data-dependent init of each module's first cross-attention stage.

    Grid-cell features share a dominant common component (the background look
    of the scenes); pooled exemplar queries inherit it, so identity dot-product
    matching ranks background cells above the exemplar's own class cells.
    Re-basing the matcher on the mean grid cell turns the attention logits
    into scale^2 * (q - g_mean)·(k - g_mean) and the values into deviations
    (k - g_mean): retrieval then keys on what makes a cell unusual, not on how
    much background it shares with every other cell. Deterministic (first
    n_scenes of the split, no rng); touches only gcp.* parameters; the
    zero-gate identity is unaffected. Returns g_mean."""
    if model.gcp is None:
        raise ConfigurationError("stage-1 centering needs an attached GCP stack")
    scenes = dataset.scenes(split)[:n_scenes]
    if not scenes:
        raise ArgumentError(f"split {split!r} is empty")
    total = torch.zeros(model.config.d, dtype=DTYPE)
    n_cells = 0
    with torch.no_grad():
        for start in range(0, len(scenes), 16):
            chunk = scenes[start:start + 16]
            grids = model.encode_image_batch(
                np.stack([dataset.load_image(r) for r in chunk]))
            total += grids.sum(dim=(0, 1))
            n_cells += grids.shape[0] * grids.shape[1]
    g_mean = total / n_cells
    eye = torch.eye(model.config.d, dtype=DTYPE)
    with torch.no_grad():
        for i in model.gcp.layer_indices:
            attn = model.gcp.layer_for(i).xmha_vi
            attn.wq.weight.copy_(scale * eye)
            attn.wq.bias.copy_(-scale * g_mean)
            attn.wk.weight.copy_(scale * eye)
            attn.wk.bias.copy_(-scale * g_mean)
            attn.wv.weight.copy_(eye)
            attn.wv.bias.copy_(-g_mean)
    return g_mean


def modulate(model: MultiModalDetector, dataset: SceneDataset, bank: VisionQueryBank,
             cfg: TrainConfig, split: str = "pretrain") -> list[dict]:
    """Train the GCP stack on a frozen detector; returns the step log.

    A stack whose gates are all still exactly zero (never trained) first gets
    its stage-1 matchers centered on the split's grid statistics; a stack that
    has already been trained keeps its learned projections."""
    if model.gcp is None:
        raise ConfigurationError("modulate needs a model with an attached GCP stack")
    apply_freeze(model, cfg.freeze)
    if float(model.gcp.gate_scalars().detach().abs().max()) == 0.0:
        center_stage1(model, dataset, split)
    optimizer = gcp_optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, 17])
    entry_ids = split_entry_ids(dataset.vocab, split)
    prompt_labels = [dataset.vocab[i].label for i in entry_ids]
    label_index = {lab: c for c, lab in enumerate(prompt_labels)}

    def class_of_entry(entry_id: int) -> int:
        return label_index.get(dataset.vocab[entry_id].label, -1)

    return _run_training(model, dataset, split, prompt_labels, class_of_entry,
                         optimizer, rng, cfg.epochs, cfg.batch_size, cfg.loc_weight,
                         bank, cfg.mask_rate)


def partial_finetune(model: MultiModalDetector, dataset: SceneDataset,
                     bank: VisionQueryBank, cfg: TrainConfig) -> list[dict]:
    """Few-shot adaptation: the modulation loop over the fewshot split (novel
    entries included in the prompt)."""
    return modulate(model, dataset, bank, cfg, split="fewshot")


def pretrain_baseline(model: MultiModalDetector, dataset: SceneDataset,
                      cfg: PretrainConfig) -> list[dict]:
    """Train the whole detector from scratch with text-only prompts over the
    unique names of the pretrain entries. No masking, no GCP.

    Alongside the detection losses, a supervised cell-contrastive term shapes
    the grid geometry (weight cfg.con_weight): grid cells lying on ground-truth
    instances are embedded so that cells of the *same vocab entry* attract and
    cells of different entries repel, across the batch and across an augmented
    view (per-channel gain jitter plus fresh pixel noise — the factors the
    scenes randomize per instance). Exemplar-feature matching needs grid
    features that separate every visually distinct entry per cell; the
    grounding loss cannot provide that for entries sharing a text name (one
    embedding serves both, by design), and at this scale the handful of
    visual attributes gives the encoder no incentive to separate them on its
    own — this term stands in for the feature richness a large pretraining
    corpus would otherwise supply. The text pathway is untouched: shared
    names still share one embedding and remain inseparable by text queries."""
    if model.gcp is not None:
        raise ConfigurationError("pretrain the baseline before attaching a GCP stack")
    for p in model.parameters():
        p.requires_grad_(True)
    mcfg = model.config
    aux_rng = np.random.default_rng([cfg.seed, 23])
    tau = 0.2

    def object_cells(recs: list[SceneRecord]) -> tuple[list[int], list[int], list[int]]:
        """Object-covered cells as (image, cell, entry) triples; cells claimed
        by two instances are dropped (their class would be ill-defined)."""
        img_idx, cell_idx, entries = [], [], []
        for j, rec in enumerate(recs):
            owner: dict[int, int] = {}
            for inst in rec.instances:
                for c in covered_cells(inst.bbox, mcfg):
                    owner[c] = inst.entry_id if c not in owner else -1
            for c in sorted(owner):
                if owner[c] >= 0:
                    img_idx.append(j)
                    cell_idx.append(c)
                    entries.append(owner[c])
        return img_idx, cell_idx, entries

    def aux_loss(grids: torch.Tensor, image_batch: np.ndarray,
                 recs: list[SceneRecord]) -> torch.Tensor:
        gains = aux_rng.uniform(0.7, 1.3, size=(image_batch.shape[0], 1, 1, 3))
        noise = aux_rng.normal(0.0, 0.03, size=image_batch.shape)
        img_idx, cell_idx, entries = object_cells(recs)
        if not img_idx:
            return torch.zeros((), dtype=DTYPE)
        views = np.clip(image_batch * gains + noise, 0.0, 1.0)
        aug = model.encode_image_batch(views)
        za = torch.nn.functional.normalize(grids[img_idx, cell_idx], dim=1)
        zb = torch.nn.functional.normalize(aug[img_idx, cell_idx], dim=1)
        z = torch.cat([za, zb])
        ent = torch.tensor(entries + entries)
        sim = z @ z.T / tau
        self_mask = torch.eye(z.shape[0], dtype=torch.bool)
        pos = (ent[:, None] == ent[None, :]) & ~self_mask
        denom = torch.logsumexp(sim.masked_fill(self_mask, float("-inf")), dim=1)
        # every anchor has at least its own augmented twin as a positive
        con = -((sim - denom[:, None]) * pos).sum(dim=1) / pos.sum(dim=1)
        return cfg.con_weight * con.mean()

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999),
                                  eps=1e-8, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 17])
    base_entries = split_entry_ids(dataset.vocab, "pretrain")
    names: list[str] = []
    for i in base_entries:
        if dataset.vocab[i].text_name not in names:
            names.append(dataset.vocab[i].text_name)
    name_index = {n: c for c, n in enumerate(names)}

    def class_of_entry(entry_id: int) -> int:
        return name_index.get(dataset.vocab[entry_id].text_name, -1)

    # the baseline prompt needs labels that resolve to those names: use one
    # representative entry label per name
    label_of_name = {}
    for i in base_entries:
        e = dataset.vocab[i]
        label_of_name.setdefault(e.text_name, e.label)
    prompt_labels = [label_of_name[n] for n in names]

    return _run_training(model, dataset, "pretrain", prompt_labels, class_of_entry,
                         optimizer, rng, cfg.epochs, cfg.batch_size, cfg.loc_weight,
                         bank=None, mask_rate=0.0,
                         aux_loss=aux_loss if cfg.con_weight > 0 else None)


def write_ndjson(records: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
