import json
import os

import numpy as np
import pytest
import torch

from mqdet.checkpoint import (MANIFEST, PARAMS, load_checkpoint, load_params,
                              read_manifest, save_checkpoint)
from mqdet.detector import build_model
from mqdet.errors import FormatError

from conftest import rand_image


def _randomize(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def test_roundtrip_baseline(tiny_cfg, tmp_path, rng):
    model = build_model(tiny_cfg, seed=3)
    _randomize(model, 1)
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.gcp is None
    # on-disk contract is f32: loaded values equal the f32 cast of the originals
    for name, p in model.state_dict().items():
        want = torch.as_tensor(p.numpy().astype(np.float32).astype(np.float64))
        assert torch.equal(back.state_dict()[name], want), name
    # a second save -> load round-trips bitwise
    path2 = str(tmp_path / "ckpt2")
    save_checkpoint(back, path2)
    twice = load_checkpoint(path2)
    for name, p in back.state_dict().items():
        assert torch.equal(twice.state_dict()[name], p), name


def test_roundtrip_modulated_preserves_kind_and_config(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg, seed=0, with_gcp=True, gcp_seed=7)
    _randomize(model, 2)
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path)
    manifest = read_manifest(path)
    assert manifest["kind"] == "modulated"
    back = load_checkpoint(path)
    assert back.gcp is not None
    assert back.config == tiny_cfg
    assert set(back.state_dict()) == set(model.state_dict())


def test_roundtrip_after_loading_behaves_identically(tiny_cfg, tmp_path, rng):
    model = build_model(tiny_cfg, seed=5, with_gcp=True)
    _randomize(model, 3)
    save_checkpoint(model, str(tmp_path / "c"))
    back = load_checkpoint(str(tmp_path / "c"))
    image = rand_image(rng, tiny_cfg.image_size)
    a = back.encode_image(image).grid
    # the reloaded model is self-consistent: a second reload gives bitwise equality
    again = load_checkpoint(str(tmp_path / "c"))
    b = again.encode_image(image).grid
    assert torch.equal(a, b)


def test_manifest_lists_params_in_state_dict_order(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg, seed=0, with_gcp=True)
    save_checkpoint(model, str(tmp_path / "c"))
    manifest = read_manifest(str(tmp_path / "c"))
    names = [e["name"] for e in manifest["params"]]
    assert names == list(model.state_dict().keys())
    n_floats = sum(int(np.prod(e["shape"])) if e["shape"] else 1
                   for e in manifest["params"])
    assert os.path.getsize(tmp_path / "c" / PARAMS) == 4 * n_floats


def test_format_errors(tiny_cfg, tmp_path):
    with pytest.raises(FormatError):
        read_manifest(str(tmp_path / "nothing"))

    model = build_model(tiny_cfg, seed=0)
    path = str(tmp_path / "c")
    save_checkpoint(model, path)

    manifest = read_manifest(path)
    manifest["format_version"] = 2
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        read_manifest(path)

    save_checkpoint(model, path)  # restore
    with open(os.path.join(path, PARAMS), "rb") as f:
        raw = f.read()
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(raw[:-8])  # truncate
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with open(os.path.join(path, PARAMS), "wb") as f:
        f.write(raw + b"\x00" * 4)  # trailing floats
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_mismatched_param_names_rejected(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg, seed=0)
    path = str(tmp_path / "c")
    save_checkpoint(model, path)
    manifest = read_manifest(path)
    manifest["params"][0]["name"] = "not.a.real.parameter"
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_load_params_shapes(tiny_cfg, tmp_path):
    model = build_model(tiny_cfg, seed=0)
    path = str(tmp_path / "c")
    save_checkpoint(model, path)
    manifest = read_manifest(path)
    params = load_params(path, manifest)
    for name, p in model.state_dict().items():
        assert params[name].shape == p.shape
        assert params[name].dtype == torch.float64
