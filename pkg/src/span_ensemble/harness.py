"""Desk-scale evaluation: JSONL datasets, per-task metrics, and sweeps over
span length, filter threshold, filter on/off, and pool composition.

Examples can be evaluated concurrently; per-example records are keyed by
id and sorted before aggregation, so reports are identical for any worker
count (timing statistics aside).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .backends import EnsemblePool, load_pool
from .core import generate
from .errors import DatasetError, SpanEnsembleError
from .metrics import corpus_bleu, exact_match, numeric_match, sentence_bleu
from .types import EnsembleConfig

logger = logging.getLogger(__name__)

TASK_KINDS = ("exact_match", "numeric", "translation")
METRICS = ("em", "numeric", "bleu")


@dataclass(frozen=True)
class EvalExample:
    """One dataset row: a prompt and its gold references."""

    id: str
    prompt: str
    references: tuple[str, ...]
    task_kind: str


@dataclass
class EvalReport:
    """Per-example records plus the aggregate metric and timing statistics.

    ``stats["mean_ms_per_word"]`` is the ensemble overhead per generated
    word: scoring + selection wall time (the work a single model would not
    do) divided by the number of generated words.
    """

    metric: str
    aggregate: float
    config: dict
    records: list[dict]
    stats: dict

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "aggregate": self.aggregate,
            "config": self.config,
            "stats": self.stats,
            "records": self.records,
        }

    def comparable_dict(self) -> dict:
        """The report minus timing fields, for determinism checks."""
        data = self.to_dict()
        data["stats"] = {
            k: v
            for k, v in data["stats"].items()
            if k not in ("mean_ms_per_word", "extra_ms", "wall_ms")
        }
        return data


def _parse_example(row: dict, where: str) -> EvalExample:
    try:
        example_id = row["id"]
        prompt = row["prompt"]
        references = row["references"]
        task_kind = row["task_kind"]
    except KeyError as exc:
        raise DatasetError(f"{where}: missing field {exc.args[0]!r}") from exc
    if not isinstance(example_id, str) or not example_id:
        raise DatasetError(f"{where}: 'id' must be a non-empty string")
    if not isinstance(prompt, str) or not prompt:
        raise DatasetError(f"{where}: 'prompt' must be a non-empty string")
    if (
        not isinstance(references, list)
        or not references
        or not all(isinstance(r, str) for r in references)
    ):
        raise DatasetError(f"{where}: 'references' must be a non-empty list of strings")
    if task_kind not in TASK_KINDS:
        raise DatasetError(f"{where}: 'task_kind' must be one of {TASK_KINDS}")
    if task_kind == "numeric":
        for ref in references:
            try:
                float(ref.replace(",", ""))
            except ValueError:
                raise DatasetError(f"{where}: numeric reference {ref!r} is not a number") from None
    return EvalExample(
        id=example_id, prompt=prompt, references=tuple(references), task_kind=task_kind
    )


def load_dataset(path: str | Path) -> list[EvalExample]:
    """Read a JSONL dataset; parse errors abort with the offending line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    examples: list[EvalExample] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: invalid JSON: {exc}") from exc
        if not isinstance(row, dict):
            raise DatasetError(f"{where}: expected an object")
        examples.append(_parse_example(row, where))
    if not examples:
        raise DatasetError(f"dataset {path} contains no examples")
    return examples


def _score_prediction(metric: str, prediction: str, references: Sequence[str]) -> float:
    if metric == "em":
        return 100.0 if exact_match(prediction, references) else 0.0
    if metric == "numeric":
        return 100.0 if numeric_match(prediction, references) else 0.0
    if metric == "bleu":
        return sentence_bleu(prediction, references)
    raise ValueError(f"unknown metric {metric!r}")


def run_eval(
    dataset: str | Path | Sequence[EvalExample],
    pool: str | Path | EnsemblePool,
    config: EnsembleConfig,
    metric: str,
    *,
    workers: int = 4,
    gen_workers: int | None = None,
    retries: int = 0,
) -> EvalReport:
    """Ensemble-decode every dataset example and aggregate the metric.

    Examples whose generation fails outright score 0 and are counted in
    ``stats["failures"]``; the run continues.
    """
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if isinstance(dataset, (str, Path)):
        examples = load_dataset(dataset)
        dataset_name = str(dataset)
    else:
        examples = list(dataset)
        dataset_name = "<in-memory>"
    if isinstance(pool, (str, Path)):
        pool = load_pool(pool)

    def run_one(example: EvalExample) -> dict:
        try:
            transcript = generate(
                pool, example.prompt, config, workers=gen_workers, retries=retries
            )
        except SpanEnsembleError as exc:
            logger.warning("example %s failed: %s", example.id, exc)
            return {
                "id": example.id,
                "prediction": "",
                "score": 0.0,
                "references": list(example.references),
                "failed": True,
                "rounds": 0,
                "words": 0,
                "extra_ms": 0.0,
            }
        prediction = transcript.final_text
        words = sum(
            rr.candidates[rr.winner_index].word_count for rr in transcript.rounds
        )
        extra_ms = sum(
            rr.timings.scoring_ms + rr.timings.selection_ms for rr in transcript.rounds
        )
        return {
            "id": example.id,
            "prediction": prediction,
            "score": _score_prediction(metric, prediction, example.references),
            "references": list(example.references),
            "failed": False,
            "rounds": len(transcript.rounds),
            "words": words,
            "extra_ms": extra_ms,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            raw_records = list(executor.map(run_one, examples))
    else:
        raw_records = [run_one(example) for example in examples]
    raw_records.sort(key=lambda record: record["id"])

    total_words = sum(record["words"] for record in raw_records)
    total_rounds = sum(record["rounds"] for record in raw_records)
    total_extra_ms = sum(record["extra_ms"] for record in raw_records)
    failures = sum(1 for record in raw_records if record["failed"])

    if metric == "bleu":
        aggregate = corpus_bleu(
            [record["prediction"] for record in raw_records],
            [record["references"] for record in raw_records],
        )
    else:
        aggregate = sum(record["score"] for record in raw_records) / len(raw_records)

    records = [
        {
            "id": record["id"],
            "prediction": record["prediction"],
            "score": record["score"],
            "failed": record["failed"],
        }
        for record in raw_records
    ]
    return EvalReport(
        metric=metric,
        aggregate=aggregate,
        config={
            "dataset": dataset_name,
            "pool": list(pool.names),
            "span_length": config.span_length_words,
            "lambda": config.lam,
            "filter": config.filter_enabled,
            "max_total_words": config.max_total_words,
        },
        records=records,
        stats={
            "examples": len(raw_records),
            "failures": failures,
            "total_rounds": total_rounds,
            "total_words": total_words,
            "extra_ms": total_extra_ms,
            "mean_ms_per_word": (total_extra_ms / total_words) if total_words else 0.0,
        },
    )


@dataclass(frozen=True)
class SweepSpec:
    """Grid of evaluation cells: span lengths x lambdas x filter settings x
    named pool scenarios."""

    span_lengths: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    lambdas: tuple[float, ...] = (10.0,)
    filters: tuple[bool, ...] = (True,)
    pools: dict[str, str] = field(default_factory=dict)
    metric: str = "em"
    dataset: str | None = None
    max_total_words: int = 256

    def __post_init__(self) -> None:
        if not self.span_lengths or not self.lambdas or not self.filters:
            raise ValueError("sweep spec dimensions must be non-empty")
        if self.metric not in METRICS:
            raise ValueError(f"sweep metric must be one of {METRICS}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SweepSpec":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValueError(f"cannot read sweep spec {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"sweep spec {path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ValueError(f"sweep spec {path}: expected a JSON object")
        known = {
            "span_lengths",
            "lambdas",
            "filters",
            "pools",
            "metric",
            "dataset",
            "max_total_words",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"sweep spec {path}: unknown fields {sorted(unknown)}")
        kwargs: dict = {}
        if "span_lengths" in data:
            kwargs["span_lengths"] = tuple(int(v) for v in data["span_lengths"])
        if "lambdas" in data:
            kwargs["lambdas"] = tuple(float(v) for v in data["lambdas"])
        if "filters" in data:
            kwargs["filters"] = tuple(bool(v) for v in data["filters"])
        if "pools" in data:
            pools = data["pools"]
            if not isinstance(pools, dict):
                raise ValueError(f"sweep spec {path}: 'pools' must map names to paths")
            resolved = {}
            for name, pool_path in pools.items():
                p = Path(pool_path)
                resolved[str(name)] = str(p if p.is_absolute() else path.parent / p)
            kwargs["pools"] = resolved
        if "metric" in data:
            kwargs["metric"] = data["metric"]
        if "dataset" in data:
            p = Path(data["dataset"])
            kwargs["dataset"] = str(p if p.is_absolute() else path.parent / p)
        if "max_total_words" in data:
            kwargs["max_total_words"] = int(data["max_total_words"])
        return cls(**kwargs)


@dataclass
class SweepCell:
    """One grid point and its outcome (a report, or the error that sank it)."""

    span_length: int
    lam: float
    filter_enabled: bool
    pool_name: str
    report: EvalReport | None = None
    error: str | None = None


def run_sweep(
    spec: SweepSpec,
    dataset: str | Path | None = None,
    base_pool: str | Path | None = None,
    *,
    workers: int = 4,
) -> list[SweepCell]:
    """Evaluate the full Cartesian grid of the spec; per-cell failures are
    logged and the remaining cells continue."""
    dataset_path = dataset or spec.dataset
    if not dataset_path:
        raise ValueError("no dataset: pass one or set it in the sweep spec")
    pool_paths = dict(spec.pools)
    if not pool_paths:
        if base_pool is None:
            raise ValueError("no pools: name them in the sweep spec or pass a base pool")
        pool_paths = {"pool": str(base_pool)}

    loaded_pools: dict[str, EnsemblePool] = {}
    cells: list[SweepCell] = []
    for span_length in spec.span_lengths:
        for lam in spec.lambdas:
            for filter_enabled in spec.filters:
                for pool_name, pool_path in pool_paths.items():
                    cell = SweepCell(
                        span_length=span_length,
                        lam=lam,
                        filter_enabled=filter_enabled,
                        pool_name=pool_name,
                    )
                    try:
                        if pool_name not in loaded_pools:
                            loaded_pools[pool_name] = load_pool(pool_path)
                        config = EnsembleConfig(
                            span_length_words=span_length,
                            lam=lam,
                            filter_enabled=filter_enabled,
                            max_total_words=max(spec.max_total_words, span_length),
                        )
                        cell.report = run_eval(
                            dataset_path,
                            loaded_pools[pool_name],
                            config,
                            spec.metric,
                            workers=workers,
                        )
                    except (SpanEnsembleError, ValueError, OSError) as exc:
                        logger.warning(
                            "sweep cell (L=%d, lambda=%s, filter=%s, pool=%s) failed: %s",
                            span_length, lam, filter_enabled, pool_name, exc,
                        )
                        cell.error = str(exc)
                    cells.append(cell)
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    """CSV summary of the successful sweep cells."""
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(
        ["span_length", "lambda", "filter", "pool", "metric", "value", "mean_ms_per_word"]
    )
    for cell in cells:
        if cell.report is None:
            continue
        writer.writerow(
            [
                cell.span_length,
                cell.lam,
                "on" if cell.filter_enabled else "off",
                cell.pool_name,
                cell.report.metric,
                f"{cell.report.aggregate:.4f}",
                f"{cell.report.stats['mean_ms_per_word']:.4f}",
            ]
        )
    return buffer.getvalue()


def write_sweep_csv(cells: Sequence[SweepCell], path: str | Path) -> None:
    Path(path).write_text(sweep_csv(cells), encoding="utf-8")
