"""Per-category vision query bank.

A query feature is the mean of the frozen image encoder's grid cells whose
centers fall inside the gamma-enlarged instance box (a 1x1 RoI average pool).
Features are stored as float32 (the on-disk format); sampling hands the model
k of them per category per forward pass. Eviction is FIFO at capacity K.
"""

from __future__ import annotations

import json
import os
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .detector import DetectionResult, MultiModalDetector
from .errors import ArgumentError, FormatError, ShapeError, VocabularyError
from .synth import SceneDataset, read_ppm

FORMAT_VERSION = 1


def enlarge_box(box: Sequence[float], gamma: float, image_size: float) -> tuple[float, float, float, float]:
    """Scale a box's width and height by sqrt(gamma) about its center (so the
    area scales by gamma), then clip to the image bounds."""
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise ShapeError(f"degenerate box {box!r}")
    s = gamma ** 0.5
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    hw, hh = w * s / 2.0, h * s / 2.0
    return (max(0.0, cx - hw), max(0.0, cy - hh),
            min(image_size, cx + hw), min(image_size, cy + hh))


def covered_cells(box: Sequence[float], config: ModelConfig) -> list[int]:
    """Indices of grid cells whose centers lie inside `box` (inclusive edges);
    if none do, the single cell nearest the box center."""
    g, p = config.grid_size, config.patch_size
    x1, y1, x2, y2 = box
    cells = []
    for gy in range(g):
        cy = (gy + 0.5) * p
        for gx in range(g):
            cx = (gx + 0.5) * p
            if x1 <= cx <= x2 and y1 <= cy <= y2:
                cells.append(gy * g + gx)
    if cells:
        return cells
    bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    best = min(((((gx + 0.5) * p - bx) ** 2 + ((gy + 0.5) * p - by) ** 2, gy, gx)
                for gy in range(g) for gx in range(g)))
    return [best[1] * g + best[2]]


def pool_region_feature(grid: torch.Tensor, box: Sequence[float], config: ModelConfig) -> np.ndarray:
    """Average the grid rows covering the gamma-enlarged box -> float32 [d]."""
    enlarged = enlarge_box(box, config.gamma, float(config.image_size))
    cells = covered_cells(enlarged, config)
    feat = grid[cells].mean(dim=0)
    return feat.detach().numpy().astype(np.float32)


def extract_query(model: MultiModalDetector, image, box: Sequence[float]) -> np.ndarray:
    """Encode the image with the frozen encoder and pool the enlarged box."""
    with torch.no_grad():
        feats = model.encode_image(image)
    return pool_region_feature(feats.grid, box, model.config)


class VisionQueryBank:
    def __init__(self, d: int, capacity: int, categories: Sequence[str]):
        if d < 1 or capacity < 1:
            raise ShapeError("bank needs d >= 1 and capacity >= 1")
        if len(set(categories)) != len(categories):
            raise VocabularyError("bank categories must be unique")
        self.d = int(d)
        self.capacity = int(capacity)
        self.categories = tuple(categories)
        self._store: dict[str, list[np.ndarray]] = {c: [] for c in self.categories}

    def _entries(self, category: str) -> list[np.ndarray]:
        if category not in self._store:
            raise VocabularyError(f"unknown bank category {category!r}")
        return self._store[category]

    def add(self, category: str, feature: np.ndarray) -> None:
        entries = self._entries(category)
        feat = np.asarray(feature, dtype=np.float32).reshape(-1)
        if feat.shape != (self.d,):
            raise ShapeError(f"feature must have dimension {self.d}")
        entries.append(feat.copy())
        if len(entries) > self.capacity:
            del entries[0]  # FIFO

    def count(self, category: str) -> int:
        return len(self._entries(category))

    def features(self, category: str) -> np.ndarray:
        entries = self._entries(category)
        if not entries:
            return np.zeros((0, self.d), dtype=np.float32)
        return np.stack(entries, axis=0)

    def sample_queries(self, category: str, k: int, rng: np.random.Generator) -> Optional[np.ndarray]:
        """k features [k x d]; without replacement when count >= k, with
        replacement when 1 <= count < k; None marks the empty set."""
        entries = self._entries(category)
        n = len(entries)
        if k < 1:
            raise ArgumentError("k must be >= 1")
        if n == 0:
            return None
        if n >= k:
            idx = rng.permutation(n)[:k]
        else:
            idx = rng.integers(0, n, size=k)
        return np.stack([entries[int(i)] for i in idx], axis=0)

    def counts(self) -> dict[str, int]:
        return {c: len(self._store[c]) for c in self.categories}


def online_update(bank: VisionQueryBank, detections: Iterable[DetectionResult],
                  confidence_threshold: float) -> VisionQueryBank:
    """Add every detection scoring >= threshold under its predicted category.
    Detections must carry re-extracted region features."""
    for det in detections:
        if det.score >= confidence_threshold:
            if det.feature is None:
                raise ArgumentError("online_update needs detections with region features")
            bank.add(det.label, det.feature)
    return bank


def attach_query_features(detections: Iterable[DetectionResult], grid: torch.Tensor,
                          config: ModelConfig) -> None:
    """Fill DetectionResult.feature by pooling each detected box (same gamma
    enlargement as bank building)."""
    for det in detections:
        det.feature = pool_region_feature(grid, det.box, config)


def serialize_bank(bank: VisionQueryBank, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "d": bank.d,
        "K": bank.capacity,
        "categories": [{"name": c, "count": bank.count(c)} for c in bank.categories],
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for i, c in enumerate(bank.categories):
        with open(os.path.join(path, f"category_{i:03d}.bin"), "wb") as f:
            feats = bank.features(c).astype("<f4")
            f.write(feats.tobytes(order="C"))


def deserialize_bank(path: str) -> VisionQueryBank:
    try:
        with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable bank manifest at {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported bank format_version {manifest.get('format_version')!r}")
    d, capacity = int(manifest["d"]), int(manifest["K"])
    names = [c["name"] for c in manifest["categories"]]
    bank = VisionQueryBank(d, capacity, names)
    for i, c in enumerate(manifest["categories"]):
        fname = os.path.join(path, f"category_{i:03d}.bin")
        raw = np.fromfile(fname, dtype="<f4")
        count = int(c["count"])
        if raw.size != count * d:
            raise FormatError(f"{fname}: expected {count}x{d} float32 rows, got {raw.size} values")
        for row in raw.reshape(count, d):
            bank.add(c["name"], row)
    return bank


def build_bank(model: MultiModalDetector, dataset: SceneDataset,
               split: str | Sequence[str],
               categories: Optional[Sequence[str]] = None) -> VisionQueryBank:
    """Extract one query per gt instance with the frozen encoder, from one
    split or several (processed in the given order). Bank categories default
    to the full vocab; entries absent from the split(s) simply stay empty.

    Passing ("pretrain", "fewshot") gives the standard bank: plentiful
    exemplars for base categories plus the few support exemplars that exist
    for held-out categories."""
    cfg = model.config
    if categories is None:
        categories = [e.label for e in dataset.vocab]
    bank = VisionQueryBank(cfg.d, cfg.K, categories)
    allowed = set(categories)
    splits = [split] if isinstance(split, str) else list(split)
    with torch.no_grad():
        for s in splits:
            for rec in dataset.scenes(s):
                grid = model.encode_image(dataset.load_image(rec)).grid
                for inst in rec.instances:
                    label = dataset.entry_label(inst.entry_id)
                    if label in allowed:
                        bank.add(label, pool_region_feature(grid, inst.bbox, cfg))
    return bank


def ingest_exemplars(bank: VisionQueryBank, model: MultiModalDetector, path: str) -> int:
    """Add queries from a user annotation file: a JSON list of
    {image_path, bbox: [x1,y1,x2,y2], category}. Relative image paths resolve
    against the file's directory. Returns the number of features added."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable exemplar file {path}: {e}") from e
    if not isinstance(records, list):
        raise FormatError("exemplar file must be a JSON list")
    base = os.path.dirname(os.path.abspath(path))
    added = 0
    for rec in records:
        img_path = rec["image_path"]
        if not os.path.isabs(img_path):
            img_path = os.path.join(base, img_path)
        image = read_ppm(img_path)
        bank.add(rec["category"], extract_query(model, image, rec["bbox"]))
        added += 1
    return added
