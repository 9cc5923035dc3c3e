"""Finetuning-free evaluation: COCO-style AP at IoU 0.5, query-mode
comparison (text / vision / multimodal) and the query-quality harness.

AP is all-point interpolated: greedy score-ordered matching (each gt matched
at most once, best unmatched-IoU wins), cumulative precision/recall, area
under the precision envelope. Categories without ground truth are excluded
from means. Everything runs under explicit seeds; reports are plain dicts
whose JSON form is byte-stable.
"""

from __future__ import annotations

import io
from typing import Optional, Sequence

import numpy as np
import torch

from .bank import VisionQueryBank, enlarge_box, pool_region_feature
from .detector import MultiModalDetector, MultiModalQuery, box_iou
from .errors import ArgumentError, ConfigurationError
from .synth import SceneDataset, split_entry_ids

QUERY_MODES = ("text", "vision", "multimodal")
HARNESS_SETS = ("positive", "hard_positive", "negative", "none", "mixed")


def compute_ap(detections: Sequence[dict], ground_truth: Sequence[dict],
               iou_threshold: float = 0.5) -> tuple[dict[str, float], Optional[float]]:
    """detections: {scene_id, label, box, score}; ground_truth: {scene_id,
    label, box}. Returns (per-category AP over categories with >= 1 gt, mean)."""
    gt_by_cat: dict[str, dict[int, list[list[float]]]] = {}
    for g in ground_truth:
        gt_by_cat.setdefault(g["label"], {}).setdefault(int(g["scene_id"]), []).append(
            [float(v) for v in g["box"]])
    per_category: dict[str, float] = {}
    for label in sorted(gt_by_cat):
        scenes = gt_by_cat[label]
        n_gt = sum(len(v) for v in scenes.values())
        dets = [d for d in detections if d["label"] == label]
        dets.sort(key=lambda d: -float(d["score"]))  # stable: ties keep input order
        matched: dict[int, list[bool]] = {sid: [False] * len(b) for sid, b in scenes.items()}
        tp = np.zeros(len(dets))
        for i, d in enumerate(dets):
            sid = int(d["scene_id"])
            boxes = scenes.get(sid, [])
            best, best_iou = -1, 0.0
            for j, gt_box in enumerate(boxes):
                if matched[sid][j]:
                    continue
                iou = box_iou(np.asarray(d["box"], dtype=float), np.asarray(gt_box))
                if iou > best_iou:
                    best, best_iou = j, iou
            if best >= 0 and best_iou >= iou_threshold:
                matched[sid][best] = True
                tp[i] = 1.0
        cum_tp = np.cumsum(tp)
        cum_fp = np.cumsum(1.0 - tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        mrec = np.concatenate([[0.0], recall, [1.0]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(mpre) - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
        per_category[label] = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    mean = float(np.mean(list(per_category.values()))) if per_category else None
    return per_category, mean


def _queries_for_mode(labels: Sequence[str], mode: str, bank: Optional[VisionQueryBank],
                      k: int, rng: np.random.Generator) -> tuple[list[MultiModalQuery], list[str]]:
    """Build one query per label. Vision features are sampled once (shared by
    every scene of the run). Categories with an empty bank fall back: to text
    in multimodal mode, to the pure [MASK] token in vision mode."""
    queries: list[MultiModalQuery] = []
    fallback: list[str] = []
    for lab in labels:
        if mode == "text":
            queries.append(MultiModalQuery(label=lab))
            continue
        feats = bank.sample_queries(lab, k, rng) if bank is not None else None
        if feats is None:
            fallback.append(lab)
        if mode == "vision":
            queries.append(MultiModalQuery(label=lab, vision=feats, masked=True))
        else:  # multimodal
            queries.append(MultiModalQuery(label=lab, vision=feats, masked=False))
    return queries, fallback


def finetuning_free_eval(model: MultiModalDetector, dataset: SceneDataset, split: str,
                         bank: Optional[VisionQueryBank], query_mode: str, k: int = 5,
                         seed: int = 0, score_threshold: float = 0.05,
                         nms_iou: float = 0.5) -> dict:
    """Run detection over a split with one fixed query set; returns the report."""
    if query_mode not in QUERY_MODES:
        raise ArgumentError(f"query_mode must be one of {QUERY_MODES}")
    if query_mode != "text" and bank is None:
        raise ConfigurationError(f"{query_mode} evaluation needs a query bank")
    torch.set_num_threads(1)
    entry_ids = split_entry_ids(dataset.vocab, split)
    labels = [dataset.vocab[i].label for i in entry_ids]
    rng = np.random.default_rng([seed, 99])
    queries, fallback = _queries_for_mode(labels, query_mode, bank, k, rng)

    detections: list[dict] = []
    ground_truth: list[dict] = []
    scenes = dataset.scenes(split)
    for rec in scenes:
        for inst in rec.instances:
            ground_truth.append({"scene_id": rec.scene_id,
                                 "label": dataset.entry_label(inst.entry_id),
                                 "box": list(inst.bbox)})
        for det in model.detect(dataset.load_image(rec), queries,
                                score_threshold=score_threshold, nms_iou=nms_iou):
            detections.append({"scene_id": rec.scene_id, "label": det.label,
                               "box": [float(v) for v in det.box], "score": det.score})

    per_category, mean = compute_ap(detections, ground_truth)
    report = {
        "split": split,
        "query_mode": query_mode,
        "k": k,
        "seed": seed,
        "n_scenes": len(scenes),
        "n_detections": len(detections),
        "per_category": {lab: per_category.get(lab) for lab in labels},
        "fallback_categories": fallback,
    }
    if mean is not None:
        report["mean_ap"] = mean
    holdout = {e.label for e in dataset.vocab if e.holdout}
    novel_aps = [v for lab, v in per_category.items() if lab in holdout]
    base_aps = [v for lab, v in per_category.items() if lab not in holdout]
    if novel_aps:
        report["novel_mean_ap"] = float(np.mean(novel_aps))
        if base_aps:
            report["base_mean_ap"] = float(np.mean(base_aps))
    return report


# ---------------------------------------------------------------------------
# Query-quality harness (positive / hard_positive / negative / none / mixed)


def _truncate_box(box: Sequence[float]) -> tuple[float, float, float, float]:
    """50% truncation: keep the left half of the instance box."""
    x1, y1, x2, y2 = (float(v) for v in box)
    return (x1, y1, (x1 + x2) / 2.0, y2)


def _negative_box(rng: np.random.Generator, gt_boxes: list, image_size: int,
                  tries: int = 200) -> Optional[tuple[float, float, float, float]]:
    """A background-only crop: zero IoU (and zero overlap) with every gt."""
    for _ in range(tries):
        side = int(rng.integers(10, 21))
        x0 = float(rng.integers(0, image_size - side + 1))
        y0 = float(rng.integers(0, image_size - side + 1))
        box = (x0, y0, x0 + side, y0 + side)
        if all(box_iou(np.asarray(box), np.asarray(g)) == 0.0 for g in gt_boxes):
            return box
    return None


def build_harness_banks(model: MultiModalDetector, dataset: SceneDataset,
                        source_split: str, seed: int) -> dict[str, VisionQueryBank]:
    """Derive the positive / hard_positive / negative / mixed banks from one
    split's ground truth, all pooled with the frozen encoder."""
    cfg = model.config
    labels = [e.label for e in dataset.vocab]
    banks = {name: VisionQueryBank(cfg.d, cfg.K, labels)
             for name in ("positive", "hard_positive", "negative", "mixed")}
    rng = np.random.default_rng([seed, 7])
    mix_cycle = 0
    with torch.no_grad():
        for rec in dataset.scenes(source_split):
            grid = model.encode_image(dataset.load_image(rec)).grid
            gt_boxes = [list(i.bbox) for i in rec.instances]
            for inst in rec.instances:
                label = dataset.entry_label(inst.entry_id)
                pos = pool_region_feature(grid, inst.bbox, cfg)
                hard = pool_region_feature(grid, _truncate_box(inst.bbox), cfg)
                neg_box = _negative_box(rng, gt_boxes, cfg.image_size)
                neg = None if neg_box is None else pool_region_feature(grid, neg_box, cfg)
                banks["positive"].add(label, pos)
                banks["hard_positive"].add(label, hard)
                if neg is not None:
                    banks["negative"].add(label, neg)
                mixed = (pos, hard, neg)[mix_cycle % 3]
                if mixed is not None:
                    banks["mixed"].add(label, mixed)
                mix_cycle += 1
    return banks


def query_quality_harness(model: MultiModalDetector, dataset: SceneDataset,
                          source_split: str = "fewshot", eval_split: str = "eval",
                          k: int = 5, seed: int = 0, score_threshold: float = 0.05,
                          nms_iou: float = 0.5) -> dict:
    """One finetuning_free_eval per query set, identical seeds throughout.
    The none row is literally the text-mode report."""
    banks = build_harness_banks(model, dataset, source_split, seed)
    rows: dict[str, dict] = {}
    for name in HARNESS_SETS:
        if name == "none":
            rows[name] = finetuning_free_eval(model, dataset, eval_split, None, "text",
                                              k=k, seed=seed, score_threshold=score_threshold,
                                              nms_iou=nms_iou)
        else:
            rows[name] = finetuning_free_eval(model, dataset, eval_split, banks[name],
                                              "multimodal", k=k, seed=seed,
                                              score_threshold=score_threshold, nms_iou=nms_iou)
    return {"eval_split": eval_split, "source_split": source_split, "k": k,
            "seed": seed, "rows": rows}


def harness_table(result: dict) -> str:
    labels = list(next(iter(result["rows"].values()))["per_category"])
    widths = [max(12, *(len(s) for s in HARNESS_SETS))] + [max(8, len(l)) for l in labels]
    out = io.StringIO()
    header = ["query_set".ljust(widths[0]), "mean_ap".rjust(8)]
    header += [l.rjust(w) for l, w in zip(labels, widths[1:])]
    out.write("  ".join(header) + "\n")
    for name in HARNESS_SETS:
        rep = result["rows"][name]
        cells = [name.ljust(widths[0]), _fmt(rep.get("mean_ap")).rjust(8)]
        cells += [_fmt(rep["per_category"][l]).rjust(w) for l, w in zip(labels, widths[1:])]
        out.write("  ".join(cells) + "\n")
    return out.getvalue()


def harness_csv(result: dict) -> str:
    labels = list(next(iter(result["rows"].values()))["per_category"])
    lines = ["query_set,mean_ap," + ",".join(labels)]
    for name in HARNESS_SETS:
        rep = result["rows"][name]
        cells = [name, _fmt(rep.get("mean_ap"))]
        cells += [_fmt(rep["per_category"][l]) for l in labels]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"
