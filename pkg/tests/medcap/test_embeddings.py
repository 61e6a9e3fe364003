"""Tests for the hashing embedding providers."""

import numpy as np
import pytest
import torch

from medcap.embeddings import HashingMultimodalEmbedder, HashingTextEmbedder, as_vector
from medcap.synthetic import make_synthetic_dataset


def test_text_embedding_is_unit_norm_and_deterministic() -> None:
    embedder = HashingTextEmbedder(dimension=32)

    first = embedder.embed("Right lower lobe consolidation")
    second = HashingTextEmbedder(dimension=32).embed("right lower lobe consolidation")

    assert first.shape == (32,)
    assert np.linalg.norm(first) == pytest.approx(1.0)
    assert np.array_equal(first, second)


def test_text_embedding_of_empty_text_is_zero() -> None:
    assert not np.any(HashingTextEmbedder().embed("?!"))


def test_related_words_share_features() -> None:
    """Test morphological variants score closer than unrelated words."""
    embedder = HashingTextEmbedder(dimension=256)
    lung = embedder.embed("lung")

    assert float(lung @ embedder.embed("lungs")) > float(lung @ embedder.embed("fracture"))


def test_invalid_dimension() -> None:
    with pytest.raises(ValueError):
        HashingTextEmbedder(dimension=0)


def test_image_embedding() -> None:
    """Test image vectors are unit norm, seeded and image dependent."""
    ct, mri = make_synthetic_dataset(2, size=16)
    embedder = HashingMultimodalEmbedder(dimension=16, seed=3)

    vector = embedder.embed_image(ct)

    assert vector.shape == (16,)
    assert np.linalg.norm(vector) == pytest.approx(1.0)
    assert np.allclose(vector, HashingMultimodalEmbedder(dimension=16, seed=3).embed_image(ct))
    assert not np.allclose(vector, embedder.embed_image(mri))
    assert embedder.embed_text("chest").shape == (16,)


def test_as_vector_flattens_tensors() -> None:
    assert as_vector(torch.ones(1, 3)).tolist() == [1.0, 1.0, 1.0]
    assert as_vector([[1, 2]]).dtype == np.float64
