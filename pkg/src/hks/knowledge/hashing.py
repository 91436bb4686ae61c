"""Feature hashing: a fixed seeded random projection, unit-normalized.

The encoder is an interface point; this default keeps the artifact
self-contained and deterministic. One projection matrix serves the whole
experiment, so equal inputs always hash identically.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..errors import DegenerateInputError, InvalidInputError
from .cache import SampleId

Array = np.ndarray


@dataclass(frozen=True)
class HashVector:
    id: SampleId
    h: Array


class RandomProjectionEncoder:
    """d_hash x input_dim seeded Gaussian projection with L2 normalization."""

    def __init__(self, input_dim: int, d_hash: int, seed: int):
        if input_dim < 1 or d_hash < 1:
            raise InvalidInputError("input_dim and d_hash must be >= 1")
        self.input_dim = input_dim
        self.d_hash = d_hash
        self.seed = seed
        rng = np.random.default_rng([seed, 7477])
        self.projection = rng.standard_normal((d_hash, input_dim))

    def encode(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("cannot hash non-finite features")
        h = self.projection @ x
        norm = np.linalg.norm(h)
        if norm == 0.0:
            raise DegenerateInputError("projection collapsed the input to zero")
        return h / norm

    def encode_rows(self, X: Array) -> Array:
        """Batched encode; raises on any zero-norm row."""
        H = X @ self.projection.T
        norms = np.linalg.norm(H, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("projection collapsed an input to zero")
        return H / norms


@lru_cache(maxsize=32)
def _cached_encoder(input_dim: int, d_hash: int, seed: int) -> RandomProjectionEncoder:
    return RandomProjectionEncoder(input_dim, d_hash, seed)


def encode_hash(x: Array, d_hash: int, encoder_seed: int) -> Array:
    """Hash one feature vector with the experiment-wide seeded projection."""
    x = np.asarray(x, dtype=np.float64)
    return _cached_encoder(x.shape[0], d_hash, encoder_seed).encode(x)
