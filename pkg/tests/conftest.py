import numpy as np
import pytest

from caqa import corpus
from caqa.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic dataset shared by unit tests (not for accuracy checks)."""
    cfg = corpus.SynthConfig(n_movies=16, sentences_per_plot=3, vocab_size=60,
                             dim=8, seed=5)
    return corpus.gen_synthetic(cfg)


@pytest.fixture(scope="session")
def tiny_ds(tiny_data):
    return tiny_data[0]


@pytest.fixture(scope="session")
def tiny_table(tiny_data):
    return tiny_data[1]


def tiny_config(aggregator, **kw):
    base = dict(aggregator=aggregator, hidden=10, conv_channels_per_width=6,
                conv_widths=(1, 3), dense_size=8, embedding_dim=8, seed=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session", params=["cnn", "rnn_lstm"])
def tiny_params(request, tiny_table):
    """Freshly initialized (untrained) tiny model, both aggregators."""
    return init_model(tiny_config(request.param), tiny_table, dtype=np.float64)
