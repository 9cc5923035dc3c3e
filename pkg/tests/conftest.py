import numpy as np
import pytest
import torch

from mqdet.config import ModelConfig, VocabEntry

TINY_VOCAB = (
    VocabEntry("a/circle", "a", "circle", "solid", "small"),
    VocabEntry("a/square", "a", "square", "solid", "large"),
    VocabEntry("b", "b", "triangle", "striped", "small"),
)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    # 16x16 image over 8px patches -> 4 regions; 2 text blocks, GCP after the last
    return ModelConfig(d=8, heads=2, image_size=16, patch_size=8, image_layers=1,
                       text_layers=2, gcp_layers=(1,), vocab=TINY_VOCAB, K=50, k=3)


@pytest.fixture
def micro_cfg() -> ModelConfig:
    # single-head d=4 config for the exhaustive loop-oracle comparisons
    return ModelConfig(d=4, heads=1, image_size=16, patch_size=8, image_layers=1,
                       text_layers=2, gcp_layers=(1,), vocab=TINY_VOCAB, K=50, k=2)


DATA_VOCAB = (
    VocabEntry("a/circle", "a", "circle", "solid", "small"),
    VocabEntry("a/square", "a", "square", "solid", "large"),
    VocabEntry("b", "b", "triangle", "striped", "small"),
    VocabEntry("nov", "nov", "square", "striped", "large", holdout=True),
)

DATA_CFG = ModelConfig(d=16, heads=2, image_size=64, patch_size=8, image_layers=1,
                       text_layers=2, gcp_layers=(1,), vocab=DATA_VOCAB, K=50, k=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset (64px scenes) plus a matching frozen model.
    Tests must not mutate the model; build a fresh one from DATA_CFG instead."""
    from mqdet.detector import build_model
    from mqdet.synth import SceneDataset, generate_dataset

    out = str(tmp_path_factory.mktemp("tiny_data"))
    generate_dataset(7, DATA_VOCAB,
                     {"pretrain": 6, "fewshot": 4, "eval": 4, "eval_novel": 2}, out)
    dataset = SceneDataset(out)
    model = build_model(DATA_CFG, seed=0, with_gcp=True)
    return dataset, model


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def rand_image(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.random((size, size, 3), dtype=np.float32)


def rand_queries(rng: np.random.Generator, k: int, d: int) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal((k, d)))
