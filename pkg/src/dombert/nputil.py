"""Shared numeric helpers and the seed-derivation scheme."""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DegenerateEmbeddingError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Named sub-streams of the run seed. All randomness in a run flows from a
# single root seed; each component gets its own child stream so that changing
# e.g. the dropout setting never shifts the sampler's draws.
STREAM_INIT = 0
STREAM_SAMPLER = 1
STREAM_MASKING = 2
STREAM_DROPOUT = 3
STREAM_SYNTH = 4
STREAM_EVAL = 5


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """Child generator `stream` of the root `seed` (spawn-key derivation)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def row_norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(d * d, axis=-1))


def normalize_rows(d: np.ndarray, context: str = "embedding matrix") -> np.ndarray:
    """Rows scaled to unit norm. Zero-norm rows are a hard error, not a fixup."""
    norms = row_norms(d)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateEmbeddingError(f"zero-norm row {bad} in {context}")
    return d / norms[:, None]


def cosine_matrix(d: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows, clipped to [-1, 1]."""
    u = normalize_rows(d)
    return np.clip(u @ u.T, -1.0, 1.0)
