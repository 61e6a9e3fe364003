"""Semi-supervised modality classifier.

A residual backbone feeds the modality attention block, global pooling and a
3-way linear head. Training follows weak-to-strong consistency: labelled
batches contribute class-weighted cross-entropy, unlabelled batches contribute
cross-entropy on strong views against confident pseudo-labels from weak views.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from sklearn.model_selection import train_test_split
from torch import nn
from torchvision import models

from medcap.config import (
    AppConfig,
    AttentionConfig,
    AugmentConfig,
    AugmentParams,
    ModelConfig,
    SslConfig,
    config_from_dict,
)
from medcap.data_io import MODALITIES, ImageSample, Modality
from medcap.errors import CheckpointError, DataError, MedcapError, WeightLoadError
from medcap.logging_config import JsonLinesWriter
from medcap.modality_attention import MedicalModalityAttention

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
NUM_CLASSES = len(MODALITIES)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# --------------------------------------------------------------------------- model


class ResNetFeatures(nn.Module):
    """Torchvision ResNet truncated after its last convolutional stage."""

    def __init__(self, depth: int = 50) -> None:
        super().__init__()
        if depth == 50:
            self.body = models.resnet50(weights=None)
        elif depth == 18:
            self.body = models.resnet18(weights=None)
        else:
            raise ValueError(f"Unsupported ResNet depth: {depth}")
        self.out_channels = self.body.fc.in_features
        self.body.fc = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = self.body
        x = b.maxpool(b.relu(b.bn1(b.conv1(x))))
        return b.layer4(b.layer3(b.layer2(b.layer1(x))))

    def load_pretrained(self, path: Path) -> None:
        """Load ImageNet-style ResNet weights; classifier keys are ignored.

        Raises:
            WeightLoadError: If the file is unreadable or lacks backbone tensors
        """
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, ValueError) as e:
            raise WeightLoadError(f"Cannot read pretrained weights {path}: {e}") from None
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise WeightLoadError(f"Pretrained weights {path} are not a state dict")
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        try:
            missing, _ = self.body.load_state_dict(state, strict=False)
        except RuntimeError as e:
            raise WeightLoadError(
                f"Pretrained weights {path} do not fit the backbone: {e}"
            ) from None
        missing = [k for k in missing if not k.startswith("fc.")]
        if missing:
            raise WeightLoadError(
                f"Pretrained weights {path} are missing {len(missing)} tensors, e.g. {missing[0]}"
            )
        logger.info(f"Loaded pretrained backbone weights from {path}")


class SmallFeatures(nn.Module):
    """Compact three-stage CNN for CPU-scale experiments."""

    def __init__(self, width: int = 64) -> None:
        super().__init__()
        self.out_channels = width
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in (width // 2, width, width):
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(),
            ]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def build_backbone(name: str) -> nn.Module:
    """Feature extractor exposing ``out_channels``; any module with that contract works."""
    if name == "resnet50":
        return ResNetFeatures(depth=50)
    if name == "resnet18":
        return ResNetFeatures(depth=18)
    if name == "small":
        return SmallFeatures()
    raise ValueError(f"Unknown backbone: {name}")


class ModalityClassifier(nn.Module):
    """Backbone, modality attention, global average pooling and a 3-logit head."""

    def __init__(self, backbone: nn.Module, attention_config: Optional[AttentionConfig] = None):
        super().__init__()
        channels = int(getattr(backbone, "out_channels"))
        self.backbone = backbone
        self.attention: nn.Module = (
            MedicalModalityAttention(channels, attention_config)
            if attention_config is None or attention_config.enabled
            else nn.Identity()
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(channels, NUM_CLASSES)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.mean) / self.std
        features = self.attention(self.backbone(x))
        return self.head(torch.flatten(self.pool(features), 1))


def build_model(
    model_config: Optional[ModelConfig] = None,
    attention_config: Optional[AttentionConfig] = None,
    backbone: Optional[nn.Module] = None,
    load_pretrained: bool = True,
) -> ModalityClassifier:
    """Construct the classifier.

    Args:
        model_config: Backbone choice and optional pretrained weights file
        attention_config: Attention block hyperparameters
        backbone: Externally supplied feature extractor (overrides model_config.backbone)
        load_pretrained: Whether to apply model_config.pretrained_weights

    Raises:
        WeightLoadError: If the pretrained weights file is malformed
    """
    model_config = model_config or ModelConfig()
    if backbone is None:
        backbone = build_backbone(model_config.backbone)
        if load_pretrained and model_config.pretrained_weights:
            if not isinstance(backbone, ResNetFeatures):
                raise WeightLoadError(
                    f"Pretrained weights are only supported for ResNet backbones, "
                    f"not '{model_config.backbone}'"
                )
            backbone.load_pretrained(Path(model_config.pretrained_weights))
    return ModalityClassifier(backbone, attention_config)


# ---------------------------------------------------------------------- augmentation


class AugmentKind(str, Enum):
    WEAK = "WEAK"
    STRONG = "STRONG"


@dataclass
class AugmentationPolicy:
    kind: AugmentKind
    weak: AugmentParams = field(
        default_factory=lambda: AugmentParams(translate_fraction=0.05, flip_prob=0.5)
    )
    modality_overrides: dict[Modality, AugmentParams] = field(default_factory=dict)
    default_strong: AugmentParams = field(
        default_factory=lambda: AugmentParams(
            rotation_degrees=10.0, translate_fraction=0.10, intensity_jitter=0.1
        )
    )

    @classmethod
    def from_config(cls, config: AugmentConfig, kind: AugmentKind) -> "AugmentationPolicy":
        overrides = {Modality(name): params for name, params in config.strong.items()}
        return cls(kind=kind, weak=config.weak, modality_overrides=overrides)

    def params_for(self, modality: Optional[Modality]) -> AugmentParams:
        if self.kind is AugmentKind.WEAK:
            return self.weak
        if modality is not None and modality in self.modality_overrides:
            return self.modality_overrides[modality]
        return self.default_strong


@dataclass(frozen=True)
class TransformParams:
    flip: bool = False
    angle: float = 0.0
    translate: tuple[int, int] = (0, 0)
    contrast: float = 1.0
    brightness: float = 0.0


def sample_transform(
    params: AugmentParams, height: int, width: int, rng: np.random.Generator
) -> TransformParams:
    """Draw one set of transform parameters within the given bounds."""
    flip = bool(rng.random() < params.flip_prob)
    r = params.rotation_degrees
    angle = float(rng.uniform(-r, r)) if r > 0 else 0.0
    t = params.translate_fraction
    tx = int(round(float(rng.uniform(-t, t)) * width)) if t > 0 else 0
    ty = int(round(float(rng.uniform(-t, t)) * height)) if t > 0 else 0
    j = params.intensity_jitter
    contrast = 1.0 + float(rng.uniform(-j, j)) if j > 0 else 1.0
    brightness = float(rng.uniform(-j / 2, j / 2)) if j > 0 else 0.0
    return TransformParams(
        flip=flip, angle=angle, translate=(tx, ty), contrast=contrast, brightness=brightness
    )


def apply_transform(tensor: torch.Tensor, params: TransformParams) -> torch.Tensor:
    """Apply flip, affine and intensity changes to a C x H x W tensor in [0, 1]."""
    out = tensor
    if params.flip:
        out = TF.hflip(out)
    if params.angle != 0.0 or params.translate != (0, 0):
        out = TF.affine(
            out,
            angle=params.angle,
            translate=list(params.translate),
            scale=1.0,
            shear=[0.0, 0.0],
            interpolation=TF.InterpolationMode.BILINEAR,
            fill=0.0,
        )
    if params.contrast != 1.0 or params.brightness != 0.0:
        mean = out.mean()
        out = (out - mean) * params.contrast + mean + params.brightness
    return out.clamp(0.0, 1.0)


def _augmented_tensor(
    image: ImageSample,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    modality: Optional[Modality],
) -> torch.Tensor:
    tensor = image.to_tensor()
    params = sample_transform(policy.params_for(modality), tensor.shape[1], tensor.shape[2], rng)
    return apply_transform(tensor, params)


def augment(
    image: ImageSample,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    modality: Optional[Modality] = None,
) -> ImageSample:
    """Augment one image according to the policy.

    STRONG policies draw their bounds from the override for ``modality``
    (a pseudo-label), falling back to the image's own label.
    """
    target = modality if modality is not None else image.modality_label
    out = _augmented_tensor(image, policy, rng, target)
    return ImageSample(
        pixels=out.permute(1, 2, 0).contiguous().numpy(),
        modality_label=image.modality_label,
        record_id=image.record_id,
    )


def _augment_batch(
    images: Sequence[ImageSample],
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    modalities: Optional[Sequence[Optional[Modality]]] = None,
) -> torch.Tensor:
    targets = modalities if modalities is not None else [i.modality_label for i in images]
    return torch.stack(
        [_augmented_tensor(image, policy, rng, t) for image, t in zip(images, targets)]
    )


# -------------------------------------------------------------------------- losses


@dataclass
class ModalityPrediction:
    modality: Modality
    confidence: float
    logits: list[float]

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "ModalityPrediction":
        probs = torch.softmax(logits.double(), dim=-1)
        confidence, index = probs.max(dim=-1)
        return cls(
            modality=Modality.from_index(int(index)),
            confidence=float(confidence),
            logits=[float(v) for v in logits],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "modality": self.modality.value,
            "confidence": self.confidence,
            "logits": self.logits,
        }


def pseudo_label(
    logits: Union[torch.Tensor, Sequence[float]], tau: float
) -> Optional[tuple[int, float]]:
    """Return (class index, probability) when the top softmax probability exceeds tau.

    The comparison is strict: a probability equal to tau yields no label.

    Example:
        >>> pseudo_label([4.0, 0.0, 0.0], tau=0.95)
        (0, 0.9647...)
    """
    values = torch.as_tensor(logits, dtype=torch.float64)
    probs = torch.softmax(values, dim=-1)
    p, index = probs.max(dim=-1)
    if float(p) > tau:
        return int(index), float(p)
    return None


@dataclass
class SslLossResult:
    total: torch.Tensor
    supervised: torch.Tensor
    unsupervised: torch.Tensor
    mask_rate: float


def ssl_loss(
    labeled_logits: Optional[torch.Tensor],
    labels: Optional[torch.Tensor],
    weak_logits: Optional[torch.Tensor],
    strong_logits: Optional[torch.Tensor],
    class_weights: torch.Tensor,
    tau: float,
    lambda_u: float,
) -> SslLossResult:
    """Class-weighted semi-supervised objective.

    supervised   = mean_l  w[y] * CE(logits, y)
    unsupervised = mean_u  1[max softmax(weak) > tau] * CE(strong, argmax weak)
    total        = supervised + lambda_u * unsupervised

    The unsupervised mean runs over all unlabelled samples; masked samples
    contribute zero. Pseudo-labels carry no gradient.
    """
    reference = next(
        (t for t in (labeled_logits, strong_logits, weak_logits) if t is not None), None
    )
    dtype = reference.dtype if reference is not None else torch.float32
    device = reference.device if reference is not None else torch.device("cpu")
    zero = torch.zeros((), dtype=dtype, device=device)

    if labeled_logits is not None and labels is not None and labeled_logits.shape[0] > 0:
        per_sample = F.cross_entropy(labeled_logits, labels, reduction="none")
        weights = class_weights.to(dtype=per_sample.dtype, device=per_sample.device)[labels]
        supervised = (weights * per_sample).mean()
    else:
        supervised = zero

    mask_rate = 0.0
    if (
        weak_logits is not None
        and strong_logits is not None
        and weak_logits.shape[0] > 0
    ):
        with torch.no_grad():
            probs = torch.softmax(weak_logits.detach(), dim=-1)
            max_probs, targets = probs.max(dim=-1)
            mask = (max_probs > tau).to(strong_logits.dtype)
        per_sample_u = F.cross_entropy(strong_logits, targets, reduction="none")
        unsupervised = (per_sample_u * mask).mean()
        mask_rate = float(mask.mean())
    else:
        unsupervised = zero

    total = supervised + lambda_u * unsupervised
    return SslLossResult(
        total=total, supervised=supervised, unsupervised=unsupervised, mask_rate=mask_rate
    )


def compute_class_weights(labels: Sequence[Modality]) -> dict[Modality, float]:
    """Inverse-frequency class weights normalized to mean 1.

    Raises:
        DataError: If any modality is absent

    Example:
        >>> counts = [Modality.CT] * 100 + [Modality.MRI] * 100 + [Modality.XRAY] * 100
        >>> compute_class_weights(counts)[Modality.MRI]
        1.0
    """
    counts = {m: 0 for m in MODALITIES}
    for label in labels:
        counts[Modality(label)] += 1
    absent = [m.value for m, n in counts.items() if n == 0]
    if absent:
        raise DataError(f"Labelled data has no samples for: {', '.join(absent)}")
    total = sum(counts.values())
    raw = {m: total / (NUM_CLASSES * n) for m, n in counts.items()}
    mean = sum(raw.values()) / NUM_CLASSES
    return {m: w / mean for m, w in raw.items()}


# ---------------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    config: dict[str, Any]
    epoch: int
    metrics: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Path:
    """Write a checkpoint archive (weights + JSON config snapshot + format version)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "state_dict": checkpoint.state_dict,
            "config": json.dumps(checkpoint.config, sort_keys=True),
            "epoch": checkpoint.epoch,
            "metrics": json.dumps(checkpoint.metrics, sort_keys=True),
        },
        path,
    )
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint archive.

    Raises:
        CheckpointError: If the file is missing, unreadable, or from another format version
    """
    if not Path(path).exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from None
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise CheckpointError(f"Not a medcap checkpoint: {path}")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        config = json.loads(payload["config"])
        metrics = json.loads(payload.get("metrics", "{}"))
    except (TypeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint metadata in {path}: {e}") from None
    return Checkpoint(
        state_dict=payload["state_dict"],
        config=config,
        epoch=int(payload.get("epoch", 0)),
        metrics=metrics,
    )


# ------------------------------------------------------------------------ training


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _split_labeled(
    labeled: Sequence[ImageSample], val_fraction: float, seed: int
) -> tuple[list[ImageSample], list[ImageSample]]:
    """Stratified train/validation split of the labelled set.

    Stratification needs two images per class; with fewer the split is
    drawn without it.
    """
    labels = [s.modality_label.class_index for s in labeled]  # type: ignore[union-attr]
    n_val = max(NUM_CLASSES, int(round(val_fraction * len(labeled))))
    if len(labeled) - n_val < NUM_CLASSES:
        logger.warning(
            f"Only {len(labeled)} labelled images; validating on the training set"
        )
        return list(labeled), list(labeled)
    counts = np.bincount(labels, minlength=NUM_CLASSES)
    stratify: Optional[list[int]] = labels
    if counts.min() < 2:
        sparse = [m.value for m, c in zip(MODALITIES, counts) if c < 2]
        logger.warning(
            f"Fewer than 2 labelled images for {', '.join(sparse)}; "
            "splitting validation without stratification"
        )
        stratify = None
    indices = np.arange(len(labeled))
    train_idx, val_idx = train_test_split(
        indices, test_size=n_val, stratify=stratify, random_state=seed
    )
    return [labeled[i] for i in sorted(train_idx)], [labeled[i] for i in sorted(val_idx)]


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    loss: float
    per_class: dict[str, float]


@torch.no_grad()
def evaluate_metrics(
    model: nn.Module, samples: Sequence[ImageSample], batch_size: int = 64
) -> EvalMetrics:
    """Accuracy, mean cross-entropy and per-modality accuracy over labelled samples."""
    if not samples:
        return EvalMetrics(accuracy=0.0, loss=0.0, per_class={m.value: 0.0 for m in MODALITIES})
    was_training = model.training
    model.eval()
    correct = np.zeros(NUM_CLASSES)
    seen = np.zeros(NUM_CLASSES)
    loss_sum = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        logits = model(torch.stack([s.to_tensor() for s in chunk]))
        targets = torch.tensor(
            [s.modality_label.class_index for s in chunk]  # type: ignore[union-attr]
        )
        loss_sum += float(F.cross_entropy(logits, targets, reduction="sum"))
        for p, t in zip(logits.argmax(dim=1).tolist(), targets.tolist()):
            seen[t] += 1
            correct[t] += int(p == t)
    model.train(was_training)
    per_class = {
        m.value: float(correct[i] / seen[i]) if seen[i] else 0.0
        for i, m in enumerate(MODALITIES)
    }
    return EvalMetrics(
        accuracy=float(correct.sum() / len(samples)),
        loss=loss_sum / len(samples),
        per_class=per_class,
    )


def train(
    labeled: Sequence[ImageSample],
    unlabeled: Sequence[ImageSample],
    config: Optional[AppConfig] = None,
    log_path: Optional[Path] = None,
    validation: Optional[Sequence[ImageSample]] = None,
) -> Checkpoint:
    """Train the modality classifier and return the best checkpoint by validation accuracy.

    Ties on accuracy go to the epoch with the lower validation loss.

    Args:
        labeled: Images with modality labels (all three classes required)
        unlabeled: Images without labels; ignored when lambda_u is 0
        config: Application configuration (model, attention, ssl, augment sections)
        log_path: Optional JSON-lines file receiving one object per epoch
        validation: Held-out labelled images; when given, all of ``labeled`` is
            used for training instead of splitting off ssl.val_fraction

    Returns:
        Checkpoint holding the best weights, config snapshot, epoch and metrics

    Raises:
        DataError: If the labelled set is empty or a modality is absent
    """
    config = config or AppConfig()
    ssl: SslConfig = config.ssl
    if not labeled:
        raise DataError("Labelled data is empty")
    if any(s.modality_label is None for s in labeled):
        raise DataError("Every labelled sample needs a modality label")

    weights_map = compute_class_weights([s.modality_label for s in labeled])  # type: ignore[misc]
    if ssl.class_weights is not None:
        missing = [m.value for m in MODALITIES if m.value not in ssl.class_weights]
        if missing:
            raise DataError(f"class_weights lacks: {', '.join(missing)}")
        weights_map = {m: ssl.class_weights[m.value] for m in MODALITIES}
    class_weights = torch.tensor([weights_map[m] for m in MODALITIES], dtype=torch.float32)
    logger.info(
        "Class weights: " + ", ".join(f"{m.value}={w:.3f}" for m, w in weights_map.items())
    )

    _seed_everything(ssl.seed)
    if validation:
        if any(s.modality_label is None for s in validation):
            raise DataError("Every validation sample needs a modality label")
        train_set, val_set = list(labeled), list(validation)
    else:
        train_set, val_set = _split_labeled(labeled, ssl.val_fraction, ssl.seed)
    model = build_model(config.model, config.attention)
    model.train()

    use_unlabeled = ssl.lambda_u > 0 and len(unlabeled) > 0
    weak_policy = AugmentationPolicy.from_config(config.augment, AugmentKind.WEAK)
    strong_policy = AugmentationPolicy.from_config(config.augment, AugmentKind.STRONG)
    labeled_rng = np.random.default_rng([ssl.seed, 1])
    unlabeled_rng = np.random.default_rng([ssl.seed, 2])
    labeled_order = torch.Generator().manual_seed(ssl.seed)
    unlabeled_order = torch.Generator().manual_seed(ssl.seed + 1)

    steps_per_epoch = math.ceil(len(train_set) / ssl.batch_size_labeled)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=ssl.learning_rate,
        momentum=ssl.momentum,
        weight_decay=ssl.weight_decay,
        nesterov=ssl.nesterov,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=ssl.epochs * steps_per_epoch
    )
    history = JsonLinesWriter(log_path)

    best_acc = -1.0
    best_loss = math.inf
    best_state: dict[str, torch.Tensor] = {}
    best_epoch = 0
    best_metrics: dict[str, Any] = {}
    unlabeled_queue: list[int] = []

    for epoch in range(1, ssl.epochs + 1):
        sup_total = unsup_total = mask_total = 0.0
        perm = torch.randperm(len(train_set), generator=labeled_order).tolist()

        for step in range(steps_per_epoch):
            batch_idx = perm[step * ssl.batch_size_labeled : (step + 1) * ssl.batch_size_labeled]
            batch = [train_set[i] for i in batch_idx]
            x_l = _augment_batch(batch, weak_policy, labeled_rng)
            y_l = torch.tensor(
                [s.modality_label.class_index for s in batch]  # type: ignore[union-attr]
            )
            logits_l = model(x_l)

            weak_logits = strong_logits = None
            if use_unlabeled:
                while len(unlabeled_queue) < ssl.batch_size_unlabeled:
                    unlabeled_queue += torch.randperm(
                        len(unlabeled), generator=unlabeled_order
                    ).tolist()
                u_idx = unlabeled_queue[: ssl.batch_size_unlabeled]
                unlabeled_queue = unlabeled_queue[ssl.batch_size_unlabeled :]
                u_batch = [unlabeled[i] for i in u_idx]
                x_w = _augment_batch(u_batch, weak_policy, unlabeled_rng)
                with torch.no_grad():
                    weak_logits = model(x_w)
                guesses = [Modality.from_index(int(i)) for i in weak_logits.argmax(dim=1)]
                x_s = _augment_batch(u_batch, strong_policy, unlabeled_rng, modalities=guesses)
                strong_logits = model(x_s)

            result = ssl_loss(
                logits_l, y_l, weak_logits, strong_logits, class_weights, ssl.tau, ssl.lambda_u
            )
            optimizer.zero_grad()
            result.total.backward()
            optimizer.step()
            scheduler.step()

            sup_total += float(result.supervised)
            unsup_total += float(result.unsupervised)
            mask_total += result.mask_rate

        val = evaluate_metrics(model, val_set)
        val_acc = val.accuracy
        record = {
            "epoch": epoch,
            "sup_loss": sup_total / steps_per_epoch,
            "unsup_loss": unsup_total / steps_per_epoch,
            "mask_rate": mask_total / steps_per_epoch,
            "val_acc": val_acc,
            "val_loss": val.loss,
        }
        history.write(record)
        logger.info(
            f"epoch {epoch}/{ssl.epochs} sup={record['sup_loss']:.4f} "
            f"unsup={record['unsup_loss']:.4f} mask={record['mask_rate']:.3f} val_acc={val_acc:.4f}"
        )
        if val_acc > best_acc or (val_acc == best_acc and val.loss < best_loss):
            best_acc = val_acc
            best_loss = val.loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            best_metrics = dict(record)

    return Checkpoint(
        state_dict=best_state,
        config=config.to_dict(),
        epoch=best_epoch,
        metrics=best_metrics,
    )


# ----------------------------------------------------------------------- inference


class ModalityPredictor:
    """Inference-mode classifier restored from a checkpoint.

    Safe to share between threads: prediction never mutates the model.
    """

    def __init__(self, checkpoint: Checkpoint) -> None:
        try:
            self.config = config_from_dict(checkpoint.config)
        except MedcapError as e:
            raise CheckpointError(f"Checkpoint holds an invalid config snapshot: {e}") from None
        self.model = build_model(self.config.model, self.config.attention, load_pretrained=False)
        try:
            self.model.load_state_dict(checkpoint.state_dict)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint weights do not match the model: {e}") from None
        self.model.eval()
        self.checkpoint = checkpoint

    @classmethod
    def from_path(cls, path: Path) -> "ModalityPredictor":
        return cls(load_checkpoint(path))

    @torch.no_grad()
    def predict_logits(self, images: Sequence[ImageSample]) -> torch.Tensor:
        return self.model(torch.stack([image.to_tensor() for image in images]))

    def predict(self, image: ImageSample) -> ModalityPrediction:
        return ModalityPrediction.from_logits(self.predict_logits([image])[0])


def predict(image: ImageSample, checkpoint: Checkpoint) -> ModalityPrediction:
    """Predict the modality of one image with a freshly restored model."""
    return ModalityPredictor(checkpoint).predict(image)
