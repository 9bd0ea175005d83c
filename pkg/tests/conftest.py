import numpy as np
import pytest

from peftlab.model import ModelDims

# one layer, tiny widths: fast enough for grad checks through the full stack
TINY_DIMS = ModelDims(num_layers=1, hidden=8, heads=2, intermediate=16,
                      vocab=40, max_seq=32)
SMALL_DIMS = ModelDims(num_layers=2, hidden=16, heads=2, intermediate=32,
                       vocab=60, max_seq=48)


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)


def random_tokens(rng, batch, seq, vocab, low: int = 0):
    return rng.integers(low, vocab, size=(batch, seq))
