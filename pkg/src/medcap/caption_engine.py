"""Caption backends and the image + question -> caption pipeline.

Pipeline stages, in order: ``predict`` (modality), ``analyze`` (question),
``prompt`` (render and fuse), ``generate`` (backend). Any failure is
re-raised as a StageError naming the stage.
"""

import base64
import io
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import requests
from PIL import Image

from medcap.config import BackendConfig, PromptConfig
from medcap.data_io import ImageSample
from medcap.dual_prompt import DualPrompt, build_dual_prompt
from medcap.errors import BackendError, ConfigError, IoError, ParseError, StageError
from medcap.modality_classifier import ModalityPredictor
from medcap.question_analyzer import QuestionAnalyzer

logger = logging.getLogger(__name__)

STAGES = ("predict", "analyze", "prompt", "generate")
RETRY_DELAY_SECONDS = 1.0


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 128
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ConfigError("max_tokens must be positive", key="backend.max_tokens")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0", key="backend.temperature")

    @classmethod
    def from_config(cls, config: BackendConfig, seed: int = 0) -> "GenerationParams":
        return cls(max_tokens=config.max_tokens, temperature=config.temperature, seed=seed)

    def to_dict(self) -> dict[str, Any]:
        return {"max_tokens": self.max_tokens, "temperature": self.temperature, "seed": self.seed}


@runtime_checkable
class CaptionBackend(Protocol):
    """Text-in/text-out generator conditioned on an image.

    Implementations return non-empty text of at most ``max_tokens`` words or
    raise BackendError. ``max_concurrency`` bounds parallel generate calls.
    """

    backend_id: str
    max_concurrency: int

    def generate(self, image: ImageSample, prompt: str, params: GenerationParams) -> str: ...


def truncate_words(text: str, max_tokens: int) -> str:
    words = text.split()
    return " ".join(words[:max_tokens])


_MODALITY_CLAUSE = re.compile(r"This is an? (?P<name>.+?) image\b")
_FOCUS_CLAUSE = re.compile(r"\bFocus on (?P<terms>[^;.\n]+)", re.IGNORECASE)
_ASSESS_CLAUSE = re.compile(r"\bassess (?P<terms>[^;.\n]+)", re.IGNORECASE)


def stub_generate(image: Optional[ImageSample], prompt: str, params: GenerationParams) -> str:
    """Template caption built only from the fused prompt text.

    Example:
        >>> stub_generate(None, "This is a CT scan image.\\nFocus on lung; assess abnormal.",
        ...               GenerationParams())
        'CT scan image. The image shows abnormal in the lung region.'
    """
    modality = _MODALITY_CLAUSE.search(prompt)
    focus = _FOCUS_CLAUSE.search(prompt)
    assess = _ASSESS_CLAUSE.search(prompt)
    lead = f"{modality.group('name')} image." if modality else "Medical image."

    if focus is None and assess is None:
        body = "No specific clinical focus was given; the visible findings are described."
    else:
        findings = assess.group("terms").strip() if assess else "findings"
        anatomy = focus.group("terms").split(",")[0].strip() if focus else "imaged"
        body = f"The image shows {findings} in the {anatomy} region."
    return truncate_words(f"{lead} {body}", params.max_tokens)


class StubCaptionBackend:
    """Deterministic, stateless backend for tests and offline runs."""

    backend_id = "stub"

    def __init__(self, max_concurrency: int = 8) -> None:
        self.max_concurrency = max_concurrency

    def generate(self, image: ImageSample, prompt: str, params: GenerationParams) -> str:
        return stub_generate(image, prompt, params)


def encode_image_base64(image: ImageSample) -> str:
    """PNG-encode a sample as base64 for the HTTP wire format."""
    array = (np.clip(image.pixels, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    img = Image.fromarray(array[:, :, 0] if array.shape[2] == 1 else array)
    buffer = io.BytesIO()
    img.save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("utf-8")


class HttpCaptionBackend:
    """JSON-over-POST adapter: {image_b64, prompt, params} -> {caption}."""

    def __init__(
        self,
        endpoint: str,
        timeout_seconds: float = 30.0,
        retries: int = 2,
        max_concurrency: int = 4,
        session: Optional[requests.Session] = None,
        retry_delay: float = RETRY_DELAY_SECONDS,
    ) -> None:
        if not endpoint:
            raise ConfigError("HTTP backend requires an endpoint", key="backend.endpoint")
        self.endpoint = endpoint
        self.timeout_seconds = timeout_seconds
        self.retries = retries
        self.max_concurrency = max_concurrency
        self.retry_delay = retry_delay
        self.session = session or requests.Session()
        self.backend_id = f"http:{endpoint}"

    def _post(self, payload: dict[str, Any]) -> str:
        response = self.session.post(self.endpoint, json=payload, timeout=self.timeout_seconds)
        response.raise_for_status()
        body = response.json()
        caption = body.get("caption") if isinstance(body, dict) else None
        if not isinstance(caption, str) or not caption.strip():
            raise BackendError(f"Backend {self.endpoint} returned no caption")
        return caption.strip()

    def generate(self, image: ImageSample, prompt: str, params: GenerationParams) -> str:
        payload = {
            "image_b64": encode_image_base64(image),
            "prompt": prompt,
            "params": params.to_dict(),
        }
        attempts = self.retries + 1
        for attempt in range(1, attempts + 1):
            try:
                return truncate_words(self._post(payload), params.max_tokens)
            except (requests.RequestException, ValueError) as e:
                if attempt == attempts:
                    raise BackendError(
                        f"Backend {self.endpoint} failed after {attempts} attempts: {e}"
                    ) from None
                logger.warning(f"Backend request failed ({attempt}/{attempts}): {e}; retrying")
                time.sleep(self.retry_delay * attempt)
        raise BackendError(f"Backend {self.endpoint} failed")


def make_backend(config: BackendConfig) -> CaptionBackend:
    """Instantiate the backend selected by ``backend.kind``."""
    if config.kind == "stub":
        return StubCaptionBackend(max_concurrency=config.max_inflight)
    if config.kind == "http":
        if not config.endpoint:
            raise ConfigError(
                "backend.kind is 'http' but no endpoint is set", key="backend.endpoint"
            )
        return HttpCaptionBackend(
            config.endpoint,
            timeout_seconds=config.timeout_seconds,
            retries=config.retries,
            max_concurrency=config.max_inflight,
        )
    raise ConfigError(f"Unknown backend kind '{config.kind}'", key="backend.kind")


@dataclass
class CaptionRecord:
    record_id: str
    caption: str
    prompt: DualPrompt
    backend_id: str
    timing_ms: int

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        data: dict[str, Any] = {
            "record_id": self.record_id,
            "caption": self.caption,
            "backend_id": self.backend_id,
            "prompt": self.prompt.to_dict(),
        }
        if include_timing:
            data["timing_ms"] = self.timing_ms
        return data


def caption(
    image: ImageSample,
    question: str,
    predictor: ModalityPredictor,
    analyzer: QuestionAnalyzer,
    backend: CaptionBackend,
    params: Optional[GenerationParams] = None,
    prompt_config: Optional[PromptConfig] = None,
    record_id: Optional[str] = None,
) -> CaptionRecord:
    """Run predict -> analyze -> prompt -> generate for one image/question pair.

    Raises:
        StageError: Wrapping the failure of whichever stage raised
    """
    params = params or GenerationParams()
    started = time.perf_counter()

    try:
        prediction = predictor.predict(image)
    except Exception as e:
        raise StageError("predict", e) from e
    try:
        analysis = analyzer.analyze(question)
    except Exception as e:
        raise StageError("analyze", e) from e
    try:
        prompt = build_dual_prompt(prediction, analysis, prompt_config)
    except Exception as e:
        raise StageError("prompt", e) from e
    try:
        text = backend.generate(image, prompt.fused_text, params)
    except Exception as e:
        raise StageError("generate", e) from e
    if not text or not text.strip():
        raise StageError("generate", BackendError("Backend returned an empty caption"))

    timing_ms = int((time.perf_counter() - started) * 1000)
    logger.debug(f"Captioned {record_id or image.record_id} in {timing_ms} ms")
    return CaptionRecord(
        record_id=record_id or image.record_id,
        caption=text.strip(),
        prompt=prompt,
        backend_id=backend.backend_id,
        timing_ms=timing_ms,
    )


@dataclass(frozen=True)
class CaptionRequest:
    record_id: str
    image: ImageSample
    question: str


def caption_batch(
    requests_: Sequence[CaptionRequest],
    predictor: ModalityPredictor,
    analyzer: QuestionAnalyzer,
    backend: CaptionBackend,
    params: Optional[GenerationParams] = None,
    prompt_config: Optional[PromptConfig] = None,
    max_inflight: int = 4,
) -> list[CaptionRecord]:
    """Caption many requests with at most ``max_inflight`` concurrent calls.

    Results come back in request order.
    """
    workers = max(1, min(max_inflight, getattr(backend, "max_concurrency", max_inflight)))

    def run(request: CaptionRequest) -> CaptionRecord:
        return caption(
            request.image,
            request.question,
            predictor,
            analyzer,
            backend,
            params,
            prompt_config,
            record_id=request.record_id,
        )

    if workers == 1 or len(requests_) <= 1:
        return [run(r) for r in requests_]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, requests_))


def read_caption_requests(path: Path) -> list[tuple[str, str, str]]:
    """Read {record_id, image_path, question} lines as (record_id, image_path, question).

    Relative image paths resolve against the file's directory.

    Raises:
        IoError: If the file cannot be read
        ParseError: On malformed JSON or a missing field (with line number)
    """
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}") from None
    items: list[tuple[str, str, str]] = []
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=line_no) from None
        if not isinstance(obj, dict) or not obj.get("image_path") or not obj.get("question"):
            raise ParseError("expected an object with image_path and question", line=line_no)
        image_path = Path(str(obj["image_path"]))
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        items.append((str(obj.get("record_id", line_no)), str(image_path), str(obj["question"])))
    if not items:
        raise ParseError(f"{path} holds no records")
    return items
