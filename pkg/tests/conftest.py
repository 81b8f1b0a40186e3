import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from punctr.data import build_vocab, synth_corpus
from punctr.layers import EncoderConfig, LstmConfig
from punctr.models import ModelConfig


@pytest.fixture(scope="session")
def small_world():
    """A small but trainable fixture: corpora, vocab, and a model config."""
    pun_train, pos_train = synth_corpus(100, 160)
    pun_dev, _ = synth_corpus(200, 60)
    vocab = build_vocab([pun_train, pos_train])
    cfg = ModelConfig(
        encoder=EncoderConfig(num_layers=1, num_heads=2, d_model=16, d_ff=24,
                              max_len=16, dropout_rate=0.1),
        lstm=LstmConfig(num_cells=8, projection_dim=4),
        discriminator_hidden=16,
    )
    return {"pun_train": pun_train, "pos_train": pos_train, "pun_dev": pun_dev,
            "vocab": vocab, "config": cfg}
