"""Medcap CLI - modality-aware medical image captioning."""

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional

import torch
import typer
from rich.console import Console
from rich.table import Table

from medcap.__version__ import __version__
from medcap.caption_engine import (
    CaptionRequest,
    GenerationParams,
    caption,
    caption_batch,
    make_backend,
    read_caption_requests,
)
from medcap.config import AppConfig, load_config, parse_override
from medcap.data_io import MODALITIES, DatasetFormat, group_images, load_dataset, load_image
from medcap.embeddings import HashingMultimodalEmbedder, HashingTextEmbedder
from medcap.errors import EXIT_INTERNAL, ConfigError, DataError, MedcapError
from medcap.evaluation import (
    TABLE_COLUMNS,
    Evaluator,
    evaluate_batch,
    read_batch_jsonl,
    write_report,
)
from medcap.lexicon import DEFAULT_LEXICON_PATH, Lexicon
from medcap.logging_config import setup_logging
from medcap.modality_classifier import ModalityPredictor, save_checkpoint, train
from medcap.provenance import build_metadata, write_metadata
from medcap.question_analyzer import QuestionAnalyzer, build_dictionary
from medcap.synthetic import benchmark_config, run_synthetic_benchmark

# Initialize logging
log_level = os.getenv("MEDCAP_LOG_LEVEL", "WARNING")
log_file = os.getenv("MEDCAP_LOG_FILE")
setup_logging(level=log_level, log_file=Path(log_file) if log_file else None)

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="medcap",
    help="Modality-aware, question-guided medical image captioning",
    no_args_is_help=True,
)
console = Console(soft_wrap=True)
err_console = Console(stderr=True, soft_wrap=True)

WEIGHT_NAMES = ("alpha1", "alpha2", "beta1", "beta2", "beta3", "gamma1", "gamma2")

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="TOML configuration file")
SEED_OPTION = typer.Option(None, "--seed", help="Run seed (overrides the config file)")
SET_OPTION = typer.Option(None, "--set", help="Config override as dotted.key=value (repeatable)")


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        console.print(f"Medcap version: {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-v",
        help="Show version and exit",
        callback=version_callback,
        is_eager=True,
    ),
) -> None:
    """Medcap - modality-aware medical image captioning."""
    pass


@contextmanager
def _cli_errors() -> Iterator[None]:
    """Map exceptions onto the exit-code contract (2 config, 3 data, 4 backend, 5 internal)."""
    try:
        yield
    except typer.Exit:
        raise
    except MedcapError as e:
        err_console.print(f"[red]Error:[/red] {e}", markup=True, highlight=False)
        raise typer.Exit(code=e.exit_code) from None
    except Exception as e:
        logger.exception("Unexpected failure")
        err_console.print(f"[red]Internal error:[/red] {e}", highlight=False)
        raise typer.Exit(code=EXIT_INTERNAL) from None


def _load(
    config_path: Optional[Path],
    seed: Optional[int],
    assignments: Optional[list[str]],
    extra: Optional[dict[str, Any]] = None,
) -> AppConfig:
    overrides: dict[str, Any] = dict(parse_override(a) for a in assignments or [])
    overrides.update(extra or {})
    if seed is not None:
        overrides["seed"] = seed
    config = load_config(config_path, overrides)
    torch.manual_seed(config.seed)
    return config


def _print_json(data: Any) -> None:
    console.print_json(json.dumps(data, sort_keys=True))


def _analyzer(config: AppConfig) -> QuestionAnalyzer:
    provider = HashingTextEmbedder(config.analyzer.embedding_dim)
    lexicon = config.analyzer.lexicon
    lexicon_path = Path(lexicon) if lexicon else DEFAULT_LEXICON_PATH
    return QuestionAnalyzer(
        build_dictionary(lexicon_path, provider),
        provider,
        sim_threshold=config.analyzer.sim_threshold,
        top_k=config.analyzer.top_k,
    )


def _predictor(config: AppConfig, checkpoint: Optional[Path]) -> ModalityPredictor:
    path = checkpoint or (Path(config.model.checkpoint) if config.model.checkpoint else None)
    if path is None:
        raise ConfigError("No checkpoint given (use --checkpoint)", key="model.checkpoint")
    return ModalityPredictor.from_path(path)


def _lexicon(config: AppConfig) -> Lexicon:
    return Lexicon.load(
        Path(config.analyzer.lexicon) if config.analyzer.lexicon else None,
        Path(config.analyzer.extra_terms) if config.analyzer.extra_terms else None,
    )


@app.command("train-modality")
def train_modality(
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
    output: Optional[Path] = typer.Option(  # noqa: B008
        None, "--output", "-o", help="Checkpoint file (default: <output_dir>/modality.pt)"
    ),
) -> None:
    """Train the modality classifier on the configured VQA datasets."""
    with _cli_errors():
        config = _load(config_path, seed, assignments)
        if not config.data.datasets:
            raise ConfigError("No datasets configured", key="data.datasets")

        records = []
        for i, spec in enumerate(config.data.datasets):
            path = Path(spec.path)
            if not path.exists():
                raise ConfigError(
                    f"Dataset file not found: {path}", key=f"data.datasets[{i}].path"
                )
            root = Path(spec.image_root) if spec.image_root else None
            records += load_dataset(path, DatasetFormat(spec.format), root)

        labeled, unlabeled = [], []
        for image_path, label in group_images(records):
            try:
                sample = load_image(Path(image_path), config.data.image_size, label)
            except DataError as e:
                logger.warning(f"Skipping image: {e}")
                continue
            (labeled if label is not None else unlabeled).append(sample)
        if not labeled:
            raise DataError("No image carries a modality label")
        console.print(
            f"[blue]Training on {len(labeled)} labelled and "
            f"{len(unlabeled)} unlabelled images...[/blue]"
        )

        out_dir = Path(config.output_dir)
        checkpoint_path = output or out_dir / "modality.pt"
        log_path = checkpoint_path.with_name(checkpoint_path.stem + "_log.jsonl")
        checkpoint = train(labeled, unlabeled, config, log_path=log_path)
        save_checkpoint(checkpoint, checkpoint_path)
        write_metadata(
            checkpoint_path.parent,
            build_metadata(
                "train-modality", config.to_dict(), {"checkpoint": str(checkpoint_path)}
            ),
        )

        table = Table(title="Best Epoch")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", style="green")
        for name, value in checkpoint.metrics.items():
            table.add_row(name, f"{value:.4f}" if isinstance(value, float) else str(value))
        console.print(table)
        console.print(f"[green]✓[/green] Checkpoint: {checkpoint_path}")
        console.print(f"[blue]Training log:[/blue] {log_path}")


@app.command("predict-modality")
def predict_modality(
    image_path: Path = typer.Argument(..., help="Image file (PNG or JPEG)"),  # noqa: B008
    checkpoint: Optional[Path] = typer.Option(  # noqa: B008
        None, "--checkpoint", "-k", help="Classifier checkpoint (default: model.checkpoint)"
    ),
    output_format: str = typer.Option("json", "--format", "-f", help="json or text"),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Predict the imaging modality of one image."""
    with _cli_errors():
        if output_format not in ("json", "text"):
            raise ConfigError(f"Unknown format '{output_format}'", key="format")
        config = _load(config_path, seed, assignments)
        predictor = _predictor(config, checkpoint)
        prediction = predictor.predict(load_image(image_path, config.data.image_size))
        if output_format == "text":
            console.print(
                f"{prediction.modality.value} (confidence {prediction.confidence:.4f})",
                highlight=False,
            )
        else:
            _print_json(
                {"modality": prediction.modality.value, "confidence": prediction.confidence}
            )


@app.command("caption")
def caption_command(
    image_path: Path = typer.Argument(..., help="Image file (PNG or JPEG)"),  # noqa: B008
    question: str = typer.Option(..., "--question", "-q", help="Clinical question"),
    checkpoint: Optional[Path] = typer.Option(  # noqa: B008
        None, "--checkpoint", "-k", help="Classifier checkpoint (default: model.checkpoint)"
    ),
    emit_prompt: bool = typer.Option(False, "--emit-prompt", help="Print the fused prompt too"),
    json_output: bool = typer.Option(False, "--json", help="Print the full caption record"),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Caption one image guided by a clinical question."""
    with _cli_errors():
        config = _load(config_path, seed, assignments)
        predictor = _predictor(config, checkpoint)
        image = load_image(image_path, config.data.image_size)
        record = caption(
            image,
            question,
            predictor,
            _analyzer(config),
            make_backend(config.backend),
            GenerationParams.from_config(config.backend, seed=config.seed),
            config.prompt,
        )
        if json_output:
            _print_json(record.to_dict())
            return
        if emit_prompt:
            console.print("[blue]Prompt:[/blue]")
            console.print(record.prompt.fused_text, markup=False, highlight=False)
            console.print("[blue]Caption:[/blue]")
        console.print(record.caption, markup=False, highlight=False)


@app.command("caption-batch")
def caption_batch_command(
    input_path: Path = typer.Argument(  # noqa: B008
        ..., help="JSON-lines file of {record_id, image_path, question}"
    ),
    output: Path = typer.Option(  # noqa: B008
        ..., "--output", "-o", help="JSON-lines file receiving one caption per record"
    ),
    checkpoint: Optional[Path] = typer.Option(  # noqa: B008
        None, "--checkpoint", "-k", help="Classifier checkpoint (default: model.checkpoint)"
    ),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Caption every record of a JSON-lines file; the output feeds `evaluate`."""
    with _cli_errors():
        config = _load(config_path, seed, assignments)
        predictor = _predictor(config, checkpoint)
        items = read_caption_requests(input_path)
        requests_ = [
            CaptionRequest(
                record_id=record_id,
                image=load_image(Path(image_path), config.data.image_size, record_id=record_id),
                question=question,
            )
            for record_id, image_path, question in items
        ]
        records = caption_batch(
            requests_,
            predictor,
            _analyzer(config),
            make_backend(config.backend),
            GenerationParams.from_config(config.backend, seed=config.seed),
            config.prompt,
            max_inflight=config.backend.max_inflight,
        )
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", encoding="utf-8") as f:
            for (record_id, image_path, question), record in zip(items, records):
                line = {
                    "record_id": record_id,
                    "image_path": image_path,
                    "question": question,
                    "caption": record.caption,
                }
                f.write(json.dumps(line, sort_keys=True) + "\n")
        write_metadata(
            output.parent,
            build_metadata(
                "caption-batch",
                config.to_dict(),
                {"timing_ms": {r.record_id: r.timing_ms for r in records}},
            ),
        )
        console.print(f"[green]✓[/green] Captioned {len(records)} records: {output}")


def _weight_overrides(weights: Optional[list[str]]) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for assignment in weights or []:
        name, value = parse_override(assignment)
        if name not in WEIGHT_NAMES:
            raise ConfigError(
                f"Unknown weight '{name}', expected one of {WEIGHT_NAMES}",
                key=f"evaluation.weights.{name}",
            )
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"Weight {name} must be a number", key=f"evaluation.weights.{name}")
        overrides[f"evaluation.weights.{name}"] = float(value)
    return overrides


@app.command("evaluate")
def evaluate_command(
    input_path: Path = typer.Argument(  # noqa: B008
        ..., help="JSON-lines file of {record_id, image_path, question, caption}"
    ),
    output_dir: Optional[Path] = typer.Option(  # noqa: B008
        None, "--output-dir", "-o", help="Report directory (default: <output_dir>/evaluation)"
    ),
    weights: Optional[list[str]] = typer.Option(  # noqa: B008
        None, "--weights", "-w", help="Weight override such as alpha1=0.5 (repeatable)"
    ),
    dataset: Optional[str] = typer.Option(
        None, "--dataset", help="Dataset name for the CSV row (default: input file stem)"
    ),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Score captions without references and write report.json / report.csv."""
    with _cli_errors():
        config = _load(config_path, seed, assignments, _weight_overrides(weights))
        items = read_batch_jsonl(input_path)
        batch_items = [
            (
                item.record_id,
                load_image(Path(item.image_path), config.data.image_size, record_id=item.record_id),
                item.question,
                item.caption,
            )
            for item in items
        ]
        evaluator = Evaluator(
            HashingMultimodalEmbedder(config.analyzer.embedding_dim, seed=config.seed),
            _analyzer(config),
            _lexicon(config),
            config.evaluation,
        )
        batch = evaluate_batch(batch_items, evaluator, dataset=dataset or input_path.stem)
        out_dir = output_dir or Path(config.output_dir) / "evaluation"
        json_path, csv_path = write_report(batch, out_dir)
        write_metadata(out_dir, build_metadata("evaluate", config.to_dict()))

        table = Table(title=f"Evaluation: {batch.dataset} ({len(batch.records)} records)")
        table.add_column("Metric", style="cyan")
        table.add_column("Mean", style="green")
        for name, column in TABLE_COLUMNS.items():
            table.add_row(column, f"{batch.aggregate[name]:.4f}")
        console.print(table)
        console.print(f"[blue]Reports:[/blue] {json_path}, {csv_path}")


@app.command("analyze-question")
def analyze_question(
    question: str = typer.Argument(..., help="Clinical question"),
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Print the question type and clinical focus terms as JSON."""
    with _cli_errors():
        config = _load(config_path, seed, assignments)
        _print_json(_analyzer(config).analyze(question).to_dict())


@app.command("show-config")
def show_config(
    config_path: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    assignments: Optional[list[str]] = SET_OPTION,
) -> None:
    """Print the effective configuration as JSON."""
    with _cli_errors():
        _print_json(_load(config_path, seed, assignments).to_dict())


@app.command("benchmark")
def benchmark(
    n_train: int = typer.Option(600, "--train", min=30, help="Synthetic training images"),
    n_test: int = typer.Option(300, "--test", min=3, help="Synthetic test images"),
    labeled_fraction: float = typer.Option(
        0.1, "--labeled-fraction", min=0.01, max=0.99, help="Share of training images labelled"
    ),
    n_validation: int = typer.Option(
        150, "--validation", min=3, help="Held-out images for checkpoint selection"
    ),
    epochs: int = typer.Option(60, "--epochs", min=1, help="Training epochs per model"),
    fixmatch: bool = typer.Option(
        True, "--fixmatch/--no-fixmatch", help="Also train plain FixMatch without attention"
    ),
    seed: int = typer.Option(0, "--seed", help="Run seed"),
) -> None:
    """Compare SSL+attention against plain FixMatch and a supervised-only baseline."""
    with _cli_errors():
        config = benchmark_config(seed=seed, epochs=epochs)
        result = run_synthetic_benchmark(
            n_train,
            n_test,
            labeled_fraction,
            config,
            seed=seed,
            n_validation=n_validation,
            include_fixmatch=fixmatch,
        )
        rows = [("SSL + attention", result.ssl), ("Supervised only", result.baseline)]
        if result.fixmatch is not None:
            rows.append(("FixMatch (no attention)", result.fixmatch))

        table = Table(title="Synthetic Modality Benchmark")
        table.add_column("Model", style="cyan")
        for modality in MODALITIES:
            table.add_column(modality.value, justify="right")
        table.add_column("Average", style="green", justify="right")
        table.add_column("Epoch", justify="right")
        for name, score in rows:
            table.add_row(
                name,
                *(f"{score.per_class[m.value]:.4f}" for m in MODALITIES),
                f"{score.accuracy:.4f}",
                str(score.best_epoch),
            )
        console.print(table)
        console.print(
            f"{result.n_labeled} labelled / {result.n_unlabeled} unlabelled, "
            f"{result.n_validation} validation, {result.n_test} test images, "
            f"{result.seconds:.1f}s"
        )
        mark = "[green]✓[/green]" if result.ssl_wins else "[yellow]✗[/yellow]"
        console.print(f"{mark} SSL + attention beats supervised only: {result.ssl_wins}")


if __name__ == "__main__":
    app()
