"""Configuration dataclasses and the benchmark vocabulary.

A vocabulary *entry* is a (label, text_name, visual class) triple. Entries may
share a text_name — that is the whole point of the benchmark: two visually
distinct classes behind one word are indistinguishable to a text-only query.
The model's embedding table is keyed by text_name, so shared names genuinely
share an embedding; banks, targets and reports are keyed by entry label.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigurationError

SHAPES = ("circle", "square", "triangle")
FILLS = ("solid", "striped")
SIZES = ("small", "large")
GATE_VARIANTS = ("mlp", "scalar_only", "linear", "mlp_concat")
FREEZE_MODES = ("all", "none", "text-encoder")


@dataclass(frozen=True)
class VocabEntry:
    label: str
    text_name: str
    shape: str
    fill: str
    size: str
    holdout: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape!r}")
        if self.fill not in FILLS:
            raise ConfigurationError(f"unknown fill {self.fill!r}")
        if self.size not in SIZES:
            raise ConfigurationError(f"unknown size band {self.size!r}")

    @property
    def visual_class(self) -> tuple[str, str, str]:
        return (self.shape, self.fill, self.size)

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "text_name": self.text_name,
            "visual_class": {"shape": self.shape, "fill": self.fill, "size": self.size},
            "holdout": self.holdout,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "VocabEntry":
        vc = d["visual_class"]
        return VocabEntry(
            label=d["label"],
            text_name=d["text_name"],
            shape=vc["shape"],
            fill=vc["fill"],
            size=vc["size"],
            holdout=bool(d.get("holdout", False)),
        )


def validate_vocab(entries: tuple[VocabEntry, ...]) -> None:
    """Model-level vocab constraints: non-empty, unique labels.

    Visual-class uniqueness is *not* required here — the model supports any
    category set (no per-class parameters). Scene generation additionally
    requires distinct visual classes so annotations are unambiguous; that is
    checked in generate_dataset.
    """
    if not entries:
        raise ConfigurationError("vocab must contain at least one entry")
    labels = [e.label for e in entries]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("vocab entry labels must be unique")


# Default benchmark vocabulary: 6 base entries over 4 text names (two 2-way
# ambiguity groups: "blob" and "thing") plus 2 held-out entries whose
# shape/fill/size components all appear among the base entries.
DEFAULT_VOCAB: tuple[VocabEntry, ...] = (
    VocabEntry("blob/circle", "blob", "circle", "solid", "large"),
    VocabEntry("blob/square", "blob", "square", "striped", "large"),
    VocabEntry("thing/triangle", "thing", "triangle", "solid", "small"),
    VocabEntry("thing/circle", "thing", "circle", "striped", "small"),
    VocabEntry("ring", "ring", "circle", "striped", "large"),
    VocabEntry("box", "box", "square", "striped", "small"),
    VocabEntry("gizmo", "gizmo", "triangle", "striped", "large", holdout=True),
    VocabEntry("fin", "fin", "square", "solid", "small", holdout=True),
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; field names follow the external config schema."""

    d: int = 64                # feature dimension
    patch_size: int = 8
    image_size: int = 64       # grid is (image_size/patch_size)^2 regions
    image_layers: int = 2
    text_layers: int = 4
    heads: int = 4
    gcp_layers: tuple[int, ...] = (2, 3)   # insert GCP after these text blocks
    gate_variant: str = "mlp"
    vocab: tuple[VocabEntry, ...] = DEFAULT_VOCAB
    gamma: float = 2.25        # query-box area enlargement factor (1.5^2)
    K: int = 5000              # bank capacity per category
    k: int = 5                 # vision queries per category per forward
    mask_rate: float = 0.40

    def __post_init__(self):
        if self.d <= 0 or self.d % self.heads != 0:
            raise ConfigurationError("d must be positive and divisible by heads")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError("image_size must be a multiple of patch_size")
        if self.image_layers < 1 or self.text_layers < 1:
            raise ConfigurationError("encoders need at least one layer")
        if not all(0 <= i < self.text_layers for i in self.gcp_layers):
            raise ConfigurationError("gcp_layers must index text encoder layers")
        if len(set(self.gcp_layers)) != len(self.gcp_layers):
            raise ConfigurationError("gcp_layers must be unique")
        if self.gate_variant not in GATE_VARIANTS:
            raise ConfigurationError(f"gate_variant must be one of {GATE_VARIANTS}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigurationError("mask_rate must lie in [0, 1]")
        if self.gamma < 1.0:
            raise ConfigurationError("gamma must be >= 1")
        if not 1 <= self.k <= self.K:
            raise ConfigurationError("need 1 <= k <= K")
        validate_vocab(self.vocab)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_regions(self) -> int:
        return self.grid_size ** 2

    @property
    def text_names(self) -> tuple[str, ...]:
        """Unique text names in first-appearance order (the embedding table keys)."""
        seen: dict[str, None] = {}
        for e in self.vocab:
            seen.setdefault(e.text_name, None)
        return tuple(seen)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(e.label for e in self.vocab)

    def entry(self, label: str) -> VocabEntry:
        for e in self.vocab:
            if e.label == label:
                return e
        from .errors import VocabularyError

        raise VocabularyError(f"unknown category label {label!r}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["gcp_layers"] = list(self.gcp_layers)
        d["vocab"] = [e.to_dict() for e in self.vocab]
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["gcp_layers"] = tuple(d.get("gcp_layers", (2, 3)))
        d["vocab"] = tuple(VocabEntry.from_dict(e) for e in d["vocab"])
        return ModelConfig(**d)


@dataclass(frozen=True)
class TrainConfig:
    """Modulated pre-training / partial fine-tuning settings."""

    lr_gcp: float = 1e-5
    lr_gate: float = 5e-3
    weight_decay: float = 1e-4
    mask_rate: float = 0.40
    epochs: int = 1
    batch_size: int = 2
    seed: int = 0
    optimizer: str = "adamw"
    # "all" freezes the full detector (default); "none" and "text-encoder"
    # relax freezing for the ablations. freeze_detector == (freeze == "all").
    freeze: str = "all"
    loc_weight: float = 1.0

    def __post_init__(self):
        if self.lr_gcp <= 0 or self.lr_gate <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigurationError("mask_rate must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("need epochs >= 0 and batch_size >= 1")
        if self.optimizer != "adamw":
            raise ConfigurationError("only the adamw optimizer is supported")
        if self.freeze not in FREEZE_MODES:
            raise ConfigurationError(f"freeze must be one of {FREEZE_MODES}")
        if self.weight_decay < 0 or self.loc_weight < 0:
            raise ConfigurationError("weight_decay and loc_weight must be >= 0")

    @property
    def freeze_detector(self) -> bool:
        return self.freeze == "all"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass(frozen=True)
class PretrainConfig:
    """Baseline (from-scratch) detector training settings."""

    lr: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    loc_weight: float = 2.0
    con_weight: float = 1.0  # instance-contrastive auxiliary (0 disables)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("need epochs >= 0 and batch_size >= 1")
        if self.con_weight < 0:
            raise ConfigurationError("con_weight must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "PretrainConfig":
        return PretrainConfig(**d)


def load_json(path) -> dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def dump_json(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
