import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cachetune.kvcore import KvChunk, SeqTensor


def random_tensor(rng, n, h=2, d=4) -> SeqTensor:
    return SeqTensor(rng.standard_normal((n, h, d)).astype(np.float32))


def random_chunk(rng, n=16, h=2, d=4, layers=3, chunk_id="c") -> KvChunk:
    return KvChunk(
        chunk_id=chunk_id,
        keys_raw=tuple(random_tensor(rng, n, h, d) for _ in range(layers)),
        values=tuple(random_tensor(rng, n, h, d) for _ in range(layers)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
