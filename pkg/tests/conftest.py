import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msgblocks.blocks import Batch, MessageClassifier  # noqa: E402
from msgblocks.config import ModelConfig  # noqa: E402

TINY = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, t_max=6, vocab_size=20)


def random_batch(rng, n=4, t=6, vocab=20, feature_dim=12, n_classes=3):
    tokens = rng.integers(3, vocab, size=(n, t))
    tokens[:, 0] = 2
    lengths = rng.integers(1, t + 1, size=n)
    mask = np.arange(t)[None, :] >= lengths[:, None]
    tokens[mask] = 0
    return Batch(tokens, mask, rng.normal(size=(n, feature_dim)), rng.integers(0, n_classes, n))


@pytest.fixture
def tiny_model():
    def make(kind="weighted_concat", seed=0, cfg=TINY, use_text=True, feature_dim=12):
        return MessageClassifier.build(3, cfg.vocab_size, feature_dim, cfg, kind, seed, use_text=use_text)
    return make
