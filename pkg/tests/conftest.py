import numpy as np
import pytest

from sparsevt.data import generate_corpus, load_corpus
from sparsevt.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = generate_corpus(tmp_path_factory.mktemp("corpus"), 48, n_frames=8, seed=3, n_test=16)
    return load_corpus(root)


def tiny_config(**kw) -> ModelConfig:
    base = dict(frames=2, frame_size=16, patch=8, dim=16, heads=2, visual_depth=3, text_depth=3,
                multimodal_depth=2, text_len=8, vocab=32, prune_layers=(1, 2))
    base.update(kw)
    return ModelConfig(**base)
