"""Benchmark accuracy / thinking-length evaluation and LLM-as-judge scoring."""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import fmean
from typing import Any, Iterable, Mapping, Sequence

from cotprune.answer_matching import ExtractionMode, answers_match, extract_final_answer
from cotprune.dataset_builder import dumps_line, read_jsonl
from cotprune.metrics import WHITESPACE, TokenCounter, think_interior
from cotprune.oracle_client import (
    ChatClient,
    EndpointError,
    check_placeholders,
    load_packaged_template,
    render_template,
)
from cotprune.segmentation import DEFAULT_CONFIG, SegmentationConfig

logger = logging.getLogger(__name__)


class ScoreMissing(ValueError):
    pass


class ScoreOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class BenchItem:
    id: str
    question: str
    gold_answer: str

    def __post_init__(self) -> None:
        if not self.gold_answer.strip():
            raise ValueError(f"bench item {self.id}: empty gold answer")


def load_bench(path: str | Path) -> list[BenchItem]:
    items = []
    for i, row in enumerate(read_jsonl(path)):
        items.append(BenchItem(str(row.get("id", i)), row["question"], str(row["answer"])))
    return items


@dataclass(frozen=True)
class ItemVerdict:
    id: str
    output: str
    extracted: str | None
    correct: bool
    think_tokens: int
    has_think_block: bool
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "output": self.output,
            "extracted": self.extracted,
            "correct": self.correct,
            "think_tokens": self.think_tokens,
            "has_think_block": self.has_think_block,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ItemVerdict:
        return cls(
            id=data["id"],
            output=data["output"],
            extracted=data.get("extracted"),
            correct=bool(data["correct"]),
            think_tokens=int(data["think_tokens"]),
            has_think_block=bool(data["has_think_block"]),
            failed=bool(data.get("failed", False)),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    avg_think_tokens: float
    n_items: int
    verdicts: tuple[ItemVerdict, ...]
    n_failed: int = 0
    n_without_think: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.accuracy <= 100:
            raise ValueError("accuracy must be a percentage")
        if self.n_items != len(self.verdicts):
            raise ValueError("n_items must equal the number of verdicts")

    def summary(self) -> dict[str, Any]:
        return {
            "accuracy": round(self.accuracy, 2),
            "avg_think_tokens": round(self.avg_think_tokens, 2),
            "n_items": self.n_items,
            "n_failed": self.n_failed,
            "n_without_think": self.n_without_think,
        }


def report_from_verdicts(verdicts: Sequence[ItemVerdict], exclude_failed: bool = False) -> EvalReport:
    """Aggregate per-item verdicts. Failures count as incorrect unless excluded."""
    scored = [v for v in verdicts if not (exclude_failed and v.failed)]
    correct = sum(v.correct for v in scored)
    accuracy = 100.0 * correct / len(scored) if scored else 0.0
    answered = [v for v in verdicts if not v.failed]
    avg_tokens = fmean(v.think_tokens for v in answered) if answered else 0.0
    return EvalReport(
        accuracy=accuracy,
        avg_think_tokens=avg_tokens,
        n_items=len(verdicts),
        verdicts=tuple(verdicts),
        n_failed=sum(v.failed for v in verdicts),
        n_without_think=sum(not v.has_think_block for v in answered),
    )


def _judge_item(
    item: BenchItem,
    client: ChatClient,
    counter: TokenCounter,
    extraction: ExtractionMode,
    instruction_prefix: str,
    seg: SegmentationConfig,
) -> ItemVerdict:
    prompt = f"{instruction_prefix}{item.question}" if instruction_prefix else item.question
    try:
        output = client.complete(prompt).text
    except EndpointError as exc:
        return ItemVerdict(item.id, "", None, False, 0, False, failed=True, error=str(exc))
    interior = think_interior(output, seg)
    # no think block: count the whole output and flag it
    tokens = counter.count(interior if interior is not None else output)
    extracted = extract_final_answer(output, extraction)
    return ItemVerdict(
        id=item.id,
        output=output,
        extracted=extracted,
        correct=answers_match(extracted, item.gold_answer),
        think_tokens=tokens,
        has_think_block=interior is not None,
    )


def evaluate(
    items: Sequence[BenchItem],
    client: ChatClient,
    counter: TokenCounter = WHITESPACE,
    extraction: ExtractionMode = ExtractionMode.AUTO,
    *,
    instruction_prefix: str = "",
    verdicts_path: str | Path | None = None,
    exclude_failed: bool = False,
    workers: int = 1,
    seg: SegmentationConfig = DEFAULT_CONFIG,
) -> EvalReport:
    """Query the endpoint per item and score exact-match accuracy.

    With ``verdicts_path`` set, verdicts are appended as they complete and
    items already present in that file are not re-queried.
    """
    if not items:
        raise ValueError("no items to evaluate")
    extraction = ExtractionMode(extraction)
    done: dict[str, ItemVerdict] = {}
    if verdicts_path is not None and Path(verdicts_path).exists():
        for row in read_jsonl(verdicts_path):
            verdict = ItemVerdict.from_dict(row)
            if not verdict.failed:
                done[verdict.id] = verdict
    pending = [item for item in items if item.id not in done]
    lock = threading.Lock()
    fh = None
    if verdicts_path is not None:
        Path(verdicts_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(verdicts_path, "a", encoding="utf-8")

    def run(item: BenchItem) -> ItemVerdict:
        verdict = _judge_item(item, client, counter, extraction, instruction_prefix, seg)
        if fh is not None:
            with lock:
                fh.write(dumps_line(verdict.to_dict()))
                fh.flush()
        return verdict

    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for item, verdict in zip(pending, pool.map(run, pending)):
                done[item.id] = verdict
    finally:
        if fh is not None:
            fh.close()
    return report_from_verdicts([done[item.id] for item in items], exclude_failed)


def write_eval_outputs(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``eval-report.json`` and a compacted ``eval-verdicts.jsonl`` in item order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "eval-report.json"
    verdicts_path = out_dir / "eval-verdicts.jsonl"
    verdicts_path.write_text("".join(dumps_line(v.to_dict()) for v in report.verdicts), encoding="utf-8")
    report_path.write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return report_path, verdicts_path


# -- LLM-as-judge -----------------------------------------------------------

_SCORE = re.compile(r"Score\s*:\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeTemplate:
    text: str

    def __post_init__(self) -> None:
        check_placeholders(self.text, ("question", "response"))

    @classmethod
    def default(cls) -> JudgeTemplate:
        return cls(load_packaged_template("judge.txt"))

    def render(self, question: str, response: str) -> str:
        return render_template(self.text, {"question": question, "response": response})


def parse_score(judgement: str) -> int:
    """Score from the last ``Score: N`` in the judge output, N in 0..5."""
    matches = _SCORE.findall(judgement)
    if not matches:
        raise ScoreMissing("no 'Score: N' line in judge output")
    raw = matches[-1]
    value = float(raw)
    if not value.is_integer() or not 0 <= value <= 5:
        raise ScoreOutOfRange(f"score {raw} is not an integer in [0, 5]")
    return int(value)


def judge_score(
    question: str, response: str, judge: ChatClient, template: JudgeTemplate | None = None
) -> int:
    if not response.strip():
        raise ValueError("response to judge is empty")
    template = template or JudgeTemplate.default()
    return parse_score(judge.complete(template.render(question, response)).text)


def mean_score(scores: Iterable[int]) -> float:
    values = list(scores)
    if not values:
        raise ValueError("no scores to average")
    return fmean(values)
