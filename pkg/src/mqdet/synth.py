"""Synthetic scenes with controllable text ambiguity.

Scenes are 64x64 float32 rasters: a noisy dark background with 1-4 crisp
shapes painted over it. Because two visually distinct vocab entries can share
one text name, a text-only query provably cannot separate them — the vision
queries have to. Noise is uniform with sigma 0.05 (bounded support), so shape
pixels and background never overlap and tight boxes are raster-exact.

Per-scene determinism: every scene draws from default_rng([global_seed,
scene_id]), which also makes generation order-independent and parallelizable.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import VocabEntry, validate_vocab
from .errors import ConfigurationError, FormatError, GenerationError

IMAGE_SIZE = 64
BG_BASE = 0.12
NOISE_SIGMA = 0.05
COLOR_LO, COLOR_HI = 0.55, 0.95
STRIPE_PERIOD = 3       # horizontal bands, rows (y // 3) % 2 == 0 keep the color
STRIPE_DARK = 0.5       # dark band value = STRIPE_DARK * color
SMALL_SIDES = (10, 15)  # inclusive pixel range per size band
LARGE_SIDES = (20, 28)
MAX_INSTANCES = 4
MAX_PLACEMENT_TRIES = 100
IOU_LIMIT = 0.1

SPLITS = ("pretrain", "fewshot", "eval", "eval_novel")
DEFAULT_SPLIT_SIZES = {"pretrain": 1500, "fewshot": 48, "eval": 160, "eval_novel": 96}


@dataclass
class Instance:
    entry_id: int
    bbox: tuple[float, float, float, float]  # (x1, y1, x2, y2) pixels, tight


@dataclass
class SceneSample:
    image: np.ndarray  # [H x W x 3] float32 in [0, 1]
    instances: list[Instance]
    scene_id: int
    split: str


def rasterize_shape(shape: str, x0: int, y0: int, side: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean coverage mask via pixel-center tests."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    if shape == "square":
        return (px >= x0) & (px <= x0 + side) & (py >= y0) & (py <= y0 + side)
    if shape == "circle":
        cx, cy, r = x0 + side / 2.0, y0 + side / 2.0, side / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r ** 2
    if shape == "triangle":
        # apex top-center, base the bottom edge of the bounding square
        ax, ay = x0 + side / 2.0, float(y0)
        bx, by = float(x0), float(y0 + side)
        cx, cy = float(x0 + side), float(y0 + side)
        d1 = (px - bx) * (ay - by) - (py - by) * (ax - bx)
        d2 = (px - cx) * (by - cy) - (py - cy) * (bx - cx)
        d3 = (px - ax) * (cy - ay) - (py - ay) * (cx - ax)
        return (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
    raise ConfigurationError(f"unknown shape {shape!r}")


def tight_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise GenerationError("shape rasterized to an empty mask")
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _iou(a, b) -> float:
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def generate_scene(rng: np.random.Generator, vocab: tuple[VocabEntry, ...],
                   scene_id: int = 0, split: str = "eval",
                   allowed_entry_ids: list[int] | None = None,
                   n_instances: int | None = None,
                   size: int = IMAGE_SIZE) -> SceneSample:
    """One scene. Draw order is fixed (noise, then per-attempt entry/side/
    position/color) so a seed pins the output bitwise."""
    validate_vocab(vocab)
    if allowed_entry_ids is None:
        allowed_entry_ids = list(range(len(vocab)))
    if not allowed_entry_ids:
        raise ConfigurationError("no entries allowed for this scene")

    span = math.sqrt(3.0) * NOISE_SIGMA
    image = BG_BASE + rng.uniform(-span, span, size=(size, size, 3))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    target = int(rng.integers(1, MAX_INSTANCES + 1)) if n_instances is None else n_instances
    instances: list[Instance] = []
    boxes: list[tuple[float, float, float, float]] = []
    for _ in range(target):
        placed = False
        for _attempt in range(MAX_PLACEMENT_TRIES):
            entry_id = int(allowed_entry_ids[rng.integers(len(allowed_entry_ids))])
            entry = vocab[entry_id]
            lo, hi = SMALL_SIDES if entry.size == "small" else LARGE_SIDES
            side = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, size - side + 1))
            y0 = int(rng.integers(0, size - side + 1))
            color = COLOR_LO + (COLOR_HI - COLOR_LO) * rng.random(3)
            mask = rasterize_shape(entry.shape, x0, y0, side, size)
            box = tight_bbox(mask)
            if any(_iou(box, b) > IOU_LIMIT for b in boxes):
                continue
            paint = np.empty((size, size, 3), dtype=np.float32)
            paint[:] = color.astype(np.float32)
            if entry.fill == "striped":
                dark_rows = ((np.arange(size) // STRIPE_PERIOD) % 2) == 1
                paint[dark_rows, :, :] = (STRIPE_DARK * color).astype(np.float32)
            image[mask] = paint[mask]
            instances.append(Instance(entry_id=entry_id, bbox=box))
            boxes.append(box)
            placed = True
            break
        if not placed:
            break  # keep the instances placed so far; a scene never fails
    return SceneSample(image=image, instances=instances, scene_id=scene_id, split=split)


# ---------------------------------------------------------------------------
# PPM (P6) io — dependency-free, byte-deterministic


def write_ppm(image: np.ndarray, path: str) -> None:
    arr = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes(order="C"))


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a P6 pixmap")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (pixels.reshape(h, w, 3).astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# Dataset generation and loading


def split_entry_ids(vocab: tuple[VocabEntry, ...], split: str) -> list[int]:
    if split in ("pretrain", "eval"):
        return [i for i, e in enumerate(vocab) if not e.holdout]
    if split == "eval_novel":
        return [i for i, e in enumerate(vocab) if e.holdout]
    if split == "fewshot":
        return list(range(len(vocab)))
    raise ConfigurationError(f"unknown split {split!r}")


def _scene_job(args) -> SceneSample:
    global_seed, scene_id, split, vocab, allowed = args
    rng = np.random.default_rng([global_seed, scene_id])
    return generate_scene(rng, vocab, scene_id=scene_id, split=split,
                          allowed_entry_ids=allowed)


def generate_dataset(global_seed: int, vocab: tuple[VocabEntry, ...],
                     sizes: dict[str, int], out_dir: str, workers: int = 1) -> dict:
    """Write {scene_id}.ppm images, annotations.json, vocab.json and
    histograms.json under out_dir; returns the per-split entry histograms."""
    validate_vocab(vocab)
    classes = [e.visual_class for e in vocab]
    if len(set(classes)) != len(classes):
        # Two entries rendering identically could not be told apart by any
        # query, so their annotations would be ill-defined.
        raise GenerationError("vocab visual classes must be distinct for scene generation")
    for split in sizes:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        if sizes[split] < 0:
            raise ConfigurationError("split sizes must be >= 0")
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    scene_id = 0
    for split in SPLITS:
        count = int(sizes.get(split, 0))
        allowed = split_entry_ids(vocab, split)
        if count > 0 and not allowed:
            raise ConfigurationError(f"split {split!r} has no eligible vocab entries")
        for _ in range(count):
            jobs.append((global_seed, scene_id, split, vocab, allowed))
            scene_id += 1

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(_scene_job, jobs, chunksize=16))
    else:
        scenes = [_scene_job(j) for j in jobs]

    annotations = []
    histograms: dict[str, dict[str, int]] = {s: {e.label: 0 for e in vocab} for s in SPLITS}
    holdout_ids = {i for i, e in enumerate(vocab) if e.holdout}
    for scene in scenes:
        if scene.split == "pretrain" and any(i.entry_id in holdout_ids for i in scene.instances):
            raise GenerationError("held-out entry leaked into the pretrain split")
        write_ppm(scene.image, os.path.join(out_dir, f"{scene.scene_id}.ppm"))
        annotations.append({
            "scene_id": scene.scene_id,
            "split": scene.split,
            "instances": [{"entry_id": i.entry_id, "bbox": list(i.bbox)} for i in scene.instances],
        })
        for inst in scene.instances:
            histograms[scene.split][vocab[inst.entry_id].label] += 1

    with open(os.path.join(out_dir, "annotations.json"), "w", encoding="utf-8") as f:
        json.dump(annotations, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump({"entries": [e.to_dict() for e in vocab]}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "histograms.json"), "w", encoding="utf-8") as f:
        json.dump(histograms, f, indent=2, sort_keys=True)
        f.write("\n")
    return histograms


@dataclass
class SceneRecord:
    scene_id: int
    split: str
    instances: list[Instance]
    image_path: str


class SceneDataset:
    """Reader for a generated dataset directory."""

    def __init__(self, path: str):
        self.path = path
        try:
            with open(os.path.join(path, "annotations.json"), "r", encoding="utf-8") as f:
                annotations = json.load(f)
            with open(os.path.join(path, "vocab.json"), "r", encoding="utf-8") as f:
                vocab_doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable dataset at {path}: {e}") from e
        self.vocab: tuple[VocabEntry, ...] = tuple(
            VocabEntry.from_dict(e) for e in vocab_doc["entries"])
        validate_vocab(self.vocab)
        self._records: list[SceneRecord] = []
        for a in annotations:
            insts = [Instance(entry_id=int(i["entry_id"]), bbox=tuple(i["bbox"]))
                     for i in a["instances"]]
            self._records.append(SceneRecord(
                scene_id=int(a["scene_id"]), split=a["split"], instances=insts,
                image_path=os.path.join(path, f"{a['scene_id']}.ppm")))
        self._records.sort(key=lambda r: r.scene_id)

    def scenes(self, split: str) -> list[SceneRecord]:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return [r for r in self._records if r.split == split]

    def load_image(self, record: SceneRecord) -> np.ndarray:
        return read_ppm(record.image_path)

    def entry_label(self, entry_id: int) -> str:
        return self.vocab[entry_id].label
