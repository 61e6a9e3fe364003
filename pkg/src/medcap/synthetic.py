"""Synthetic three-modality image set and the CPU-scale training benchmark.

Each class has its own frequency/texture signature:

- CT: smooth low-frequency blobs with faint noise
- MRI: mid-frequency oriented stripes under a soft radial envelope
- XRAY: high-frequency grain over a vertical intensity gradient

Every image then passes through a random acquisition step (gain, offset,
sensor noise) shared by all classes, so intensity alone never identifies
the modality.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from sklearn.model_selection import train_test_split

from medcap.config import AppConfig, DataConfig, ModelConfig, SslConfig
from medcap.data_io import MODALITIES, ImageSample, Modality
from medcap.modality_classifier import Checkpoint, ModalityPredictor, evaluate_metrics, train

logger = logging.getLogger(__name__)

DEFAULT_SIZE = 32
DEFAULT_VALIDATION = 150

GAIN_RANGE = (0.55, 1.0)
OFFSET_RANGE = (-0.1, 0.15)
NOISE_RANGE = (0.0, 0.05)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(axis, axis, indexing="ij")


def _ct_like(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    image = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(-0.6, 0.6, size=2)
        sigma = rng.uniform(0.25, 0.5)
        image += rng.uniform(0.4, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    image = image / max(image.max(), 1e-6) * rng.uniform(0.6, 0.9)
    return image + rng.normal(0.0, 0.01, size=(size, size))


def _mri_like(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    envelope = np.exp(-(xx**2 + yy**2) / 1.2)
    return stripes * envelope * rng.uniform(0.6, 0.9) + rng.normal(0.0, 0.02, size=(size, size))


def _xray_like(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, _ = _grid(size)
    gradient = 0.3 + 0.4 * (yy + 1.0) / 2.0 * rng.uniform(0.7, 1.0)
    grain = rng.uniform(-0.25, 0.25, size=(size, size))
    return gradient + grain


_GENERATORS = {Modality.CT: _ct_like, Modality.MRI: _mri_like, Modality.XRAY: _xray_like}


def _acquire(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(*GAIN_RANGE)
    offset = rng.uniform(*OFFSET_RANGE)
    sigma = rng.uniform(*NOISE_RANGE)
    return image * gain + offset + rng.normal(0.0, sigma, size=image.shape)


def make_image(modality: Modality, size: int, rng: np.random.Generator) -> np.ndarray:
    """One H x W x 1 float32 image in [0, 1] for the given class."""
    pixels = np.clip(_acquire(_GENERATORS[modality](size, rng), rng), 0.0, 1.0)
    return pixels.astype(np.float32)[:, :, None]


def make_synthetic_dataset(n: int, size: int = DEFAULT_SIZE, seed: int = 0) -> list[ImageSample]:
    """Balanced labelled set; classes cycle CT, MRI, XRAY."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        modality = MODALITIES[i % len(MODALITIES)]
        samples.append(
            ImageSample(
                pixels=make_image(modality, size, rng),
                modality_label=modality,
                record_id=f"syn-{seed}-{i:05d}",
            )
        )
    return samples


def benchmark_config(size: int = DEFAULT_SIZE, seed: int = 0, epochs: int = 60) -> AppConfig:
    """Small-backbone configuration sized for CPU training on synthetic images."""
    return AppConfig(
        seed=seed,
        data=DataConfig(image_size=size),
        model=ModelConfig(backbone="small"),
        ssl=SslConfig(epochs=epochs, seed=seed),
    )


@dataclass
class ModelScore:
    """Test accuracy of one trained variant, overall and per modality."""

    accuracy: float
    per_class: dict[str, float]
    best_epoch: int


@dataclass
class BenchmarkResult:
    ssl: ModelScore
    baseline: ModelScore
    fixmatch: Optional[ModelScore]
    n_labeled: int
    n_unlabeled: int
    n_validation: int
    n_test: int
    seconds: float

    @property
    def ssl_accuracy(self) -> float:
        return self.ssl.accuracy

    @property
    def baseline_accuracy(self) -> float:
        return self.baseline.accuracy

    @property
    def ssl_wins(self) -> bool:
        return self.ssl.accuracy > self.baseline.accuracy

    def to_dict(self) -> dict[str, Any]:
        return {**dataclasses.asdict(self), "ssl_wins": self.ssl_wins}


def _score(checkpoint: Checkpoint, test_set: list[ImageSample]) -> ModelScore:
    metrics = evaluate_metrics(ModalityPredictor(checkpoint).model, test_set)
    return ModelScore(
        accuracy=metrics.accuracy, per_class=metrics.per_class, best_epoch=checkpoint.epoch
    )


def run_synthetic_benchmark(
    n_train: int = 600,
    n_test: int = 300,
    labeled_fraction: float = 0.1,
    config: Optional[AppConfig] = None,
    seed: int = 0,
    n_validation: int = DEFAULT_VALIDATION,
    include_fixmatch: bool = True,
) -> BenchmarkResult:
    """Train SSL+attention, a supervised-only baseline and plain FixMatch on one labelled subset.

    The baseline sees only the labelled images (lambda_u = 0). The SSL model
    additionally sees the remaining training images without labels; plain
    FixMatch is the same run with the attention block switched off. All
    variants select their checkpoint on one held-out validation set.
    """
    config = config or benchmark_config(seed=seed)
    size = config.data.image_size
    started = time.perf_counter()

    train_pool = make_synthetic_dataset(n_train, size=size, seed=seed)
    validation = make_synthetic_dataset(n_validation, size=size, seed=seed + 20_000)
    test_set = make_synthetic_dataset(n_test, size=size, seed=seed + 10_000)
    labels = [s.modality_label.class_index for s in train_pool]  # type: ignore[union-attr]
    labeled_idx, unlabeled_idx = train_test_split(
        np.arange(n_train), train_size=labeled_fraction, stratify=labels, random_state=seed
    )
    labeled = [train_pool[i] for i in sorted(labeled_idx)]
    unlabeled = [
        dataclasses.replace(train_pool[i], modality_label=None) for i in sorted(unlabeled_idx)
    ]
    logger.info(
        f"Synthetic benchmark: {len(labeled)} labelled, {len(unlabeled)} unlabelled, "
        f"{len(validation)} validation"
    )

    ssl = _score(train(labeled, unlabeled, config, validation=validation), test_set)
    baseline_config = dataclasses.replace(config, ssl=dataclasses.replace(config.ssl, lambda_u=0.0))
    baseline = _score(train(labeled, [], baseline_config, validation=validation), test_set)
    fixmatch = None
    if include_fixmatch:
        fixmatch_config = dataclasses.replace(
            config, attention=dataclasses.replace(config.attention, enabled=False)
        )
        fixmatch = _score(
            train(labeled, unlabeled, fixmatch_config, validation=validation), test_set
        )

    result = BenchmarkResult(
        ssl=ssl,
        baseline=baseline,
        fixmatch=fixmatch,
        n_labeled=len(labeled),
        n_unlabeled=len(unlabeled),
        n_validation=len(validation),
        n_test=len(test_set),
        seconds=time.perf_counter() - started,
    )
    logger.info(
        f"Synthetic benchmark: ssl={ssl.accuracy:.4f} baseline={baseline.accuracy:.4f}"
        + (f" fixmatch={fixmatch.accuracy:.4f}" if fixmatch else "")
        + f" in {result.seconds:.1f}s"
    )
    return result
