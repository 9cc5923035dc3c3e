"""Checkpoint I/O: JSON manifest + sidecar binary of little-endian float32.

The manifest lists parameters as stable dotted paths in state_dict order
(e.g. "text.block2.attn.wq.weight", "gcp.layer3.gate_scalar"); the sidecar
holds their row-major float32 bytes concatenated in the same order. Saving
f64 model values as f32 is the on-disk contract; loading promotes back to
f64 exactly, so save -> load -> save round-trips bitwise.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from .config import ModelConfig
from .detector import MultiModalDetector, build_model
from .errors import FormatError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS = "params.bin"


def save_checkpoint(model: MultiModalDetector, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    blobs = []
    for name, p in model.state_dict().items():
        arr = p.detach().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(p.shape)})
        blobs.append(arr.tobytes(order="C"))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "modulated" if model.gcp is not None else "baseline",
        "model_config": model.config.to_dict(),
        "params": entries,
    }
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(b"".join(blobs))


def read_manifest(path: str) -> dict:
    try:
        with open(os.path.join(path, MANIFEST), "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest at {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported checkpoint format_version {manifest.get('format_version')!r}")
    return manifest


def load_params(path: str, manifest: dict) -> dict[str, torch.Tensor]:
    raw = np.fromfile(os.path.join(path, PARAMS), dtype="<f4")
    out: dict[str, torch.Tensor] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        if offset + n > raw.size:
            raise FormatError("checkpoint sidecar is shorter than the manifest promises")
        out[entry["name"]] = torch.as_tensor(
            raw[offset:offset + n].astype(np.float64).reshape(shape))
        offset += n
    if offset != raw.size:
        raise FormatError("checkpoint sidecar has trailing bytes")
    return out


def load_checkpoint(path: str) -> MultiModalDetector:
    manifest = read_manifest(path)
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, seed=0, with_gcp=(manifest.get("kind") == "modulated"))
    params = load_params(path, manifest)
    state = model.state_dict()
    if set(params) != set(state):
        missing = set(state) - set(params)
        extra = set(params) - set(state)
        raise FormatError(f"checkpoint parameters do not match the config "
                          f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    model.load_state_dict(params)
    return model
