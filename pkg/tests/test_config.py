import dataclasses

import pytest

from mqdet.config import (DEFAULT_VOCAB, ModelConfig, PretrainConfig,
                          TrainConfig, VocabEntry, validate_vocab)
from mqdet.errors import ConfigurationError, VocabularyError

from conftest import TINY_VOCAB


def test_default_model_config():
    cfg = ModelConfig()
    assert cfg.d == 64 and cfg.heads == 4
    assert cfg.grid_size == 8 and cfg.n_regions == 64
    assert cfg.gcp_layers == (2, 3)  # last 2 of 4 text blocks
    assert cfg.gamma == 2.25 and cfg.K == 5000 and cfg.k == 5
    assert cfg.mask_rate == 0.40
    assert len(cfg.vocab) == 8
    assert sum(e.holdout for e in cfg.vocab) == 2


def test_default_vocab_has_two_ambiguity_groups():
    names = [e.text_name for e in DEFAULT_VOCAB]
    shared = {n for n in names if names.count(n) >= 2}
    assert len(shared) == 2


def test_text_names_first_appearance_order():
    cfg = ModelConfig(vocab=TINY_VOCAB, d=8, heads=2)
    assert cfg.text_names == ("a", "b")
    assert cfg.labels == ("a/circle", "a/square", "b")
    assert cfg.entry("a/square").shape == "square"
    with pytest.raises(VocabularyError):
        cfg.entry("zzz")


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d=10, heads=4)  # not divisible
    with pytest.raises(ConfigurationError):
        ModelConfig(image_size=60)  # not a multiple of patch_size
    with pytest.raises(ConfigurationError):
        ModelConfig(gcp_layers=(7,))  # out of range
    with pytest.raises(ConfigurationError):
        ModelConfig(gcp_layers=(2, 2))
    with pytest.raises(ConfigurationError):
        ModelConfig(gate_variant="attention")
    with pytest.raises(ConfigurationError):
        ModelConfig(mask_rate=1.5)
    with pytest.raises(ConfigurationError):
        ModelConfig(gamma=0.5)
    with pytest.raises(ConfigurationError):
        ModelConfig(k=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(k=10, K=5)


def test_vocab_validation():
    with pytest.raises(ConfigurationError):
        validate_vocab(())
    dup = (VocabEntry("x", "x", "circle", "solid", "small"),
           VocabEntry("x", "y", "square", "solid", "small"))
    with pytest.raises(ConfigurationError):
        validate_vocab(dup)
    # duplicate visual classes are a data-generation concern, not a model one
    same_look = (VocabEntry("x", "x", "circle", "solid", "small"),
                 VocabEntry("y", "y", "circle", "solid", "small"))
    validate_vocab(same_look)
    with pytest.raises(ConfigurationError):
        VocabEntry("x", "x", "pentagon", "solid", "small")
    with pytest.raises(ConfigurationError):
        VocabEntry("x", "x", "circle", "dotted", "small")
    with pytest.raises(ConfigurationError):
        VocabEntry("x", "x", "circle", "solid", "medium")


def test_model_config_dict_roundtrip():
    cfg = ModelConfig(vocab=TINY_VOCAB, d=8, heads=2, gcp_layers=(1, 3))
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert isinstance(back.gcp_layers, tuple)
    assert all(isinstance(e, VocabEntry) for e in back.vocab)


def test_train_config_validation_and_roundtrip():
    cfg = TrainConfig()
    assert cfg.lr_gcp == 1e-5 and cfg.lr_gate == 5e-3
    assert cfg.weight_decay == 1e-4 and cfg.mask_rate == 0.40
    assert cfg.freeze == "all" and cfg.freeze_detector
    assert not dataclasses.replace(cfg, freeze="none").freeze_detector
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_gcp=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_gate=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ConfigurationError):
        TrainConfig(freeze="image-encoder")
    with pytest.raises(ConfigurationError):
        TrainConfig(weight_decay=-0.1)
    TrainConfig(epochs=0)  # a 0-epoch run is a valid no-op


def test_pretrain_config_validation():
    cfg = PretrainConfig()
    assert PretrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        PretrainConfig(lr=0.0)
    with pytest.raises(ConfigurationError):
        PretrainConfig(batch_size=0)
