import numpy as np
import pytest

from dombert.corpus import CLS_ID, NUM_RESERVED, PAD_ID, SEP_ID, PackedExample


def random_packed_example(
    rng: np.random.Generator,
    max_len: int = 12,
    vocab_size: int = 30,
    domain_id: int = 0,
) -> PackedExample:
    """A structurally valid packed row with random contents and padding."""
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    valid_len = int(rng.integers(3, max_len + 1))
    ids[1 : valid_len - 1] = rng.integers(NUM_RESERVED, vocab_size, size=valid_len - 2)
    ids[valid_len - 1] = SEP_ID
    return PackedExample(ids=ids, valid_len=valid_len, domain_id=domain_id)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
