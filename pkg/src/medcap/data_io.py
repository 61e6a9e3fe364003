"""VQA dataset loading, weak modality labelling, and image decoding."""

import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from medcap.errors import DataError, DecodeError, IoError, ParseError, SchemaError

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 224


class Modality(str, Enum):
    """Imaging modality; member order fixes the classifier's class indices."""

    CT = "CT"
    MRI = "MRI"
    XRAY = "XRAY"

    @property
    def class_index(self) -> int:
        return MODALITIES.index(self)

    @classmethod
    def from_index(cls, index: int) -> "Modality":
        return MODALITIES[index]


MODALITIES: tuple[Modality, ...] = tuple(Modality)


class DatasetFormat(str, Enum):
    SLAKE_JSON = "SLAKE_JSON"
    RAD_JSON = "RAD_JSON"


# Keyword families; the bare literals "mri", "ct" and "xray" are always included.
MODALITY_KEYWORDS: dict[Modality, tuple[str, ...]] = {
    Modality.MRI: (r"mri", r"magnetic\s+resonance"),
    Modality.CT: (r"ct", r"computed\s+tomography", r"cat\s+scan"),
    Modality.XRAY: (r"xrays?", r"x-rays?", r"x\s+rays?", r"radiographs?", r"radiography"),
}

_FAMILY_PATTERNS: dict[Modality, re.Pattern[str]] = {
    modality: re.compile(r"\b(?:" + "|".join(words) + r")\b", re.IGNORECASE)
    for modality, words in MODALITY_KEYWORDS.items()
}

# Per-format field names; each entry lists accepted aliases in priority order.
FIELD_MAPS: dict[DatasetFormat, dict[str, tuple[str, ...]]] = {
    DatasetFormat.SLAKE_JSON: {
        "image_path": ("img_name", "image_path", "image"),
        "question": ("question",),
        "answer": ("answer",),
        "record_id": ("qid", "id", "record_id"),
        "modality": ("modality", "modality_label"),
    },
    DatasetFormat.RAD_JSON: {
        "image_path": ("image_name", "image_path", "image"),
        "question": ("question",),
        "answer": ("answer",),
        "record_id": ("qid", "id", "record_id"),
        "modality": ("modality_label",),
    },
}

_REQUIRED_FIELDS = ("image_path", "question", "answer")


@dataclass(frozen=True)
class VqaRecord:
    image_path: str
    question: str
    answer: str
    modality_label: Optional[Modality]
    record_id: str


@dataclass
class ImageSample:
    """Decoded image as an H x W x C float array in [0, 1]."""

    pixels: np.ndarray
    modality_label: Optional[Modality] = None
    record_id: str = ""

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DecodeError(
                f"Expected H x W x C pixels with C in (1, 3), got {self.pixels.shape}"
            )
        if not np.isfinite(self.pixels).all():
            raise DataError("Pixels contain NaN or infinite values")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(
                f"Pixels must lie in [0, 1], got [{self.pixels.min():.4g}, {self.pixels.max():.4g}]"
            )

    def to_tensor(self) -> torch.Tensor:
        """C x H x W float32 tensor, grayscale replicated to 3 channels."""
        pixels = self.pixels
        if pixels.shape[2] == 1:
            pixels = np.repeat(pixels, 3, axis=2)
        return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).float()


def parse_modality(value: Any) -> Optional[Modality]:
    """Map a dataset's modality string (e.g. "X-Ray", "mri") onto the enum."""
    if value is None:
        return None
    text = str(value).strip().upper().replace("-", "").replace(" ", "").replace("_", "")
    aliases = {"CT": Modality.CT, "MRI": Modality.MRI, "XRAY": Modality.XRAY}
    return aliases.get(text)


def match_modality_families(text: str) -> set[Modality]:
    """Return every keyword family that occurs in the text."""
    return {modality for modality, pattern in _FAMILY_PATTERNS.items() if pattern.search(text)}


def extract_weak_modality(question: str, answer: str) -> Optional[Modality]:
    """Derive a weak modality label from question and answer keywords.

    The question is checked first, then the answer. A field decides the label
    only when exactly one keyword family matches it.

    Example:
        >>> extract_weak_modality("Is this a CT or MRI?", "CT")
        <Modality.CT: 'CT'>
    """
    for text in (question or "", answer or ""):
        families = match_modality_families(text)
        if len(families) == 1:
            return next(iter(families))
    return None


def _lookup(obj: dict[str, Any], aliases: tuple[str, ...]) -> Any:
    for name in aliases:
        if name in obj and obj[name] is not None:
            return obj[name]
    return None


def load_dataset(
    path: Path, format: DatasetFormat, image_root: Optional[Path] = None
) -> list[VqaRecord]:
    """Load a VQA dataset file into records.

    Args:
        path: JSON file holding an array of objects
        format: Dataset flavour selecting the field-name mapping
        image_root: Directory image names are relative to (default: the file's directory)

    Returns:
        One record per JSON object, in file order

    Raises:
        IoError: If the file cannot be read
        ParseError: If the file is not a JSON array of objects
        SchemaError: If a record lacks a required field or repeats an id
    """
    format = DatasetFormat(format)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot read dataset {path}: {e}") from None
    try:
        items = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON in {path}: {e.msg}", line=e.lineno) from None
    if not isinstance(items, list):
        raise ParseError(f"Expected a JSON array in {path}, got {type(items).__name__}")

    mapping = FIELD_MAPS[format]
    root = image_root if image_root is not None else path.parent
    records: list[VqaRecord] = []
    seen_ids: set[str] = set()
    weak_count = 0

    for index, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaError("record is not a JSON object", index=index)
        values = {name: _lookup(item, aliases) for name, aliases in mapping.items()}
        for name in _REQUIRED_FIELDS:
            value = values[name]
            if value is None or (name == "image_path" and not str(value).strip()):
                raise SchemaError(
                    f"missing required field {name} (accepted names: {mapping[name]})",
                    index=index,
                )

        record_id = str(values["record_id"]) if values["record_id"] is not None else str(index)
        if record_id in seen_ids:
            raise SchemaError(f"duplicate record id '{record_id}'", index=index)
        seen_ids.add(record_id)

        question = str(values["question"])
        answer = str(values["answer"])
        label = parse_modality(values["modality"])
        if label is None:
            label = extract_weak_modality(question, answer)
            if label is not None:
                weak_count += 1

        image_path = Path(str(values["image_path"]))
        if not image_path.is_absolute():
            image_path = root / image_path

        records.append(
            VqaRecord(
                image_path=str(image_path),
                question=question,
                answer=answer,
                modality_label=label,
                record_id=record_id,
            )
        )

    logger.info(
        f"Loaded {len(records)} records from {path} ({format.value}); "
        f"{weak_count} weakly labelled from keywords"
    )
    return records


def group_images(records: list[VqaRecord]) -> list[tuple[str, Optional[Modality]]]:
    """Collapse question records onto unique images.

    An image keeps a label only when every labelled question about it agrees;
    conflicting images are returned unlabelled.
    """
    labels: dict[str, set[Modality]] = defaultdict(set)
    order: list[str] = []
    for record in records:
        if record.image_path not in labels:
            order.append(record.image_path)
        bucket = labels[record.image_path]
        if record.modality_label is not None:
            bucket.add(record.modality_label)

    grouped: list[tuple[str, Optional[Modality]]] = []
    for image_path in order:
        found = labels[image_path]
        if len(found) > 1:
            logger.warning(f"Conflicting modality labels for {image_path}; treating as unlabelled")
        grouped.append((image_path, next(iter(found)) if len(found) == 1 else None))
    return grouped


def load_image(
    path: Path,
    size: Optional[int] = DEFAULT_IMAGE_SIZE,
    modality_label: Optional[Modality] = None,
    record_id: str = "",
) -> ImageSample:
    """Decode an image file into a normalized 3-channel sample.

    Args:
        path: PNG or JPEG file
        size: Square output resolution (bilinear resize); None keeps the original size
        modality_label: Optional label to attach
        record_id: Identifier to attach (default: file stem)

    Returns:
        Sample with pixels scaled to [0, 1] and grayscale replicated to 3 channels

    Raises:
        IoError: If the file cannot be read
        DecodeError: If the file is not a decodable image
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                array = np.clip(np.asarray(img, dtype=np.float64) / 65535.0, 0.0, 1.0)
                img = Image.fromarray((array * 255.0).round().astype(np.uint8))
            rgb = img.convert("RGB")
    except FileNotFoundError:
        raise IoError(f"Image not found: {path}") from None
    except (PermissionError, IsADirectoryError) as e:
        raise IoError(f"Cannot read image {path}: {e}") from None
    except UnidentifiedImageError:
        raise DecodeError(f"Not a decodable image: {path}") from None
    except OSError as e:
        raise DecodeError(f"Failed to decode {path}: {e}") from None

    if size is not None and rgb.size != (size, size):
        rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)

    pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return ImageSample(
        pixels=pixels, modality_label=modality_label, record_id=record_id or path.stem
    )


def save_image(sample: ImageSample, path: Path) -> Path:
    """Write a sample as a lossless 8-bit PNG."""
    pixels = np.clip(sample.pixels, 0.0, 1.0)
    array = (pixels * 255.0).round().astype(np.uint8)
    if array.shape[2] == 1:
        img = Image.fromarray(array[:, :, 0])
    else:
        img = Image.fromarray(array)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        img.save(path, format="PNG")
    except OSError as e:
        raise IoError(f"Cannot write image {path}: {e}") from None
    return path
