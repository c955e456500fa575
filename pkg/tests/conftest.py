import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quatrain.corpus import load_corpus, load_tone_lexicon
from quatrain.model import Model, ModelConfig
from quatrain.trainer import TrainConfig, train

DATA = Path(__file__).parent / "data"


def tiny_config(vocab_size=20, **kw):
    """The small-model shape used throughout the unit tests."""
    base = dict(vocab_size=vocab_size, emb_dim=8, dec_hidden=16, attn_dim=8,
                maxout_dim=12, ssi_proj_dim=4, intent_dim=8, style_dim=8,
                clue_mode="sdu", ext_kinds="none", saliency="tfidf")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def toy_corpus():
    return load_corpus(DATA / "toy_wujue.txt")


@pytest.fixture(scope="session")
def qijue_corpus():
    return load_corpus(DATA / "toy_qijue.txt")


@pytest.fixture(scope="session")
def lexicon():
    return load_tone_lexicon(DATA / "lexicon.tsv")


@pytest.fixture(scope="session")
def quick_result(toy_corpus):
    """A briefly trained model over the fixture corpus, shared by the
    generation and CLI tests (not fully converged, but structured)."""
    config = TrainConfig(batch_size=20, learning_rate=2e-3, epochs=200,
                         max_steps=220, clue_mode="sdu", ext_kinds="none",
                         saliency="tfidf", seed=11, emb_dim=24, dec_hidden=32,
                         attn_dim=16, maxout_dim=24, ssi_proj_dim=10,
                         intent_dim=12, style_dim=8)
    return train(toy_corpus, config), config


def random_lines(rng, batch, length, vocab_size, low=4):
    return rng.integers(low, vocab_size, size=(batch, 4, length))
