"""Embedding provider interfaces and deterministic hashing stubs.

Production deployments plug a biomedical text encoder and a joint image-text
encoder in behind these protocols; the hashing stubs implement the same
contracts without model weights.
"""

import hashlib
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from medcap.data_io import ImageSample
from medcap.lexicon import tokenize


@runtime_checkable
class TextEmbeddingProvider(Protocol):
    """Deterministic text encoder returning finite vectors of fixed dimension."""

    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


@runtime_checkable
class MultimodalEmbeddingProvider(Protocol):
    """Image and text encoders sharing one embedding space."""

    dimension: int

    def embed_image(self, image: ImageSample) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _bucket(feature: str, dimension: int) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


class HashingTextEmbedder:
    """Binary bag of hashed word and character n-gram features, L2-normalized.

    Every feature of a word depends only on that word, so adding words a
    reference text already contains never lowers cosine similarity to it.
    """

    def __init__(self, dimension: int = 64, ngram: int = 3) -> None:
        if dimension <= 0 or ngram <= 0:
            raise ValueError("dimension and ngram must be positive")
        self.dimension = dimension
        self.ngram = ngram

    def features(self, text: str) -> set[str]:
        found: set[str] = set()
        for token in tokenize(text):
            found.add(f"w:{token}")
            padded = f"#{token}#"
            for i in range(max(len(padded) - self.ngram + 1, 1)):
                found.add(f"c:{padded[i : i + self.ngram]}")
        return found

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimension, dtype=np.float64)
        for feature in self.features(text):
            vector[_bucket(feature, self.dimension)] = 1.0
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector


class HashingMultimodalEmbedder:
    """Stub joint encoder: hashed text features and a fixed random image projection.

    Images are reduced to a grid of mean intensities plus a constant bias term
    and projected with a seeded Gaussian matrix, so embeddings never vanish.
    """

    def __init__(self, dimension: int = 64, grid: int = 8, seed: int = 0) -> None:
        self.dimension = dimension
        self.grid = grid
        self.text = HashingTextEmbedder(dimension)
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((dimension, grid * grid + 1))

    def embed_text(self, text: str) -> np.ndarray:
        return self.text.embed(text)

    def embed_image(self, image: ImageSample) -> np.ndarray:
        gray = image.to_tensor().mean(dim=0, keepdim=True).unsqueeze(0).double()
        pooled = F.adaptive_avg_pool2d(gray, self.grid).flatten().numpy()
        features = np.concatenate([pooled, np.ones(1)])
        vector = self._projection @ features
        return vector / np.linalg.norm(vector)


def as_vector(values: object) -> np.ndarray:
    """Coerce provider output (list, array, tensor) to a 1-D float64 array."""
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64).reshape(-1)
