"""Corpus ingestion, pruned-response reconstruction and SFT/DPO emission."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from cotprune.metrics import WHITESPACE, TokenCounter, count_think_tokens, record_ratio
from cotprune.segmentation import DEFAULT_CONFIG, SegmentationConfig, SegmentationError, parse_response
from cotprune.trace_model import (
    DistilledRecord,
    PruneOutcome,
    ReasoningTrace,
    SourceRecord,
    Status,
    derive_record_id,
)

logger = logging.getLogger(__name__)

SFT_LOSS_WEIGHT = 0.3
DPO_BETA = 0.1


class KeptLenOutOfRange(ValueError):
    pass


class CorpusError(ValueError):
    """The input file itself is unreadable; raised before any work starts."""


# -- JSON lines -------------------------------------------------------------


def dumps_line(obj: Mapping[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [dumps_line(row) for row in rows]
    path.write_text("".join(lines), encoding="utf-8")
    return len(lines)


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


# -- ingestion --------------------------------------------------------------


@dataclass(frozen=True)
class FieldMap:
    """Input field names; OpenR1-Math style sources use question="problem"."""

    id: str = "id"
    question: str = "question"
    answer: str = "answer"
    response: str = "response"

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "question": self.question, "answer": self.answer, "response": self.response}


def skip_entry(record_id: str, stage: str, reason: str, detail: str | None = None, **extra: Any) -> dict[str, Any]:
    entry: dict[str, Any] = {"id": record_id, "stage": stage, "reason": reason}
    if detail:
        entry["detail"] = detail
    entry.update(extra)
    return entry


def load_corpus(
    path: str | Path, fields: FieldMap = FieldMap()
) -> tuple[list[SourceRecord], list[dict[str, Any]]]:
    """Read a JSON-lines corpus into SourceRecords plus reason-coded skips.

    A response field holding a list yields one record per element, with ids
    suffixed ``-0``, ``-1``, ...
    """
    records: list[SourceRecord] = []
    skips: list[dict[str, Any]] = []
    seen: set[str] = set()
    for lineno, row in enumerate(read_jsonl(path), 1):
        if not isinstance(row, dict):
            raise CorpusError(f"{path}:{lineno}: expected a JSON object")
        question = row.get(fields.question)
        answer = row.get(fields.answer)
        response = row.get(fields.response)
        base_id = row.get(fields.id)
        base_id = str(base_id) if base_id not in (None, "") else None
        if not isinstance(question, str) or response is None or answer is None:
            skips.append(skip_entry(base_id or f"line-{lineno}", "ingest", "MissingField"))
            continue
        responses = response if isinstance(response, list) else [response]
        for i, raw in enumerate(responses):
            raw = "" if raw is None else str(raw)
            if base_id is None:
                rid = derive_record_id(question, raw)
            else:
                rid = f"{base_id}-{i}" if isinstance(response, list) else base_id
            if not str(answer).strip():
                skips.append(skip_entry(rid, "ingest", "EmptyGold"))
                continue
            if rid in seen:
                skips.append(skip_entry(rid, "ingest", "DuplicateId"))
                continue
            seen.add(rid)
            records.append(
                SourceRecord(id=rid, question=question, gold_answer=str(answer), raw_response=raw, meta={"line": lineno})
            )
    return records, skips


# -- pruned responses -------------------------------------------------------


def render_response(steps: Sequence[str], summary: str, cfg: SegmentationConfig = DEFAULT_CONFIG) -> str:
    body = cfg.step_separator.join(steps)
    return f"{cfg.think_open}\n{body}\n{cfg.think_close}\n\n{summary}"


def build_pruned_response(trace: ReasoningTrace, kept_len: int, cfg: SegmentationConfig = DEFAULT_CONFIG) -> str:
    """Think block with the first ``kept_len`` steps, then the original summary."""
    if not 1 <= kept_len <= trace.n:
        raise KeptLenOutOfRange(f"kept_len {kept_len} outside [1, {trace.n}]")
    return render_response(trace.steps[:kept_len], trace.summary, cfg)


def build_subsequence_response(
    trace: ReasoningTrace, indices: Sequence[int], cfg: SegmentationConfig = DEFAULT_CONFIG
) -> str:
    if not indices or any(not 0 <= i < trace.n for i in indices):
        raise KeptLenOutOfRange(f"invalid step indices {list(indices)} for {trace.n} steps")
    return render_response([trace.steps[i] for i in indices], trace.summary, cfg)


def distill(
    source: SourceRecord,
    trace: ReasoningTrace,
    outcome: PruneOutcome,
    counter: TokenCounter = WHITESPACE,
    cfg: SegmentationConfig = DEFAULT_CONFIG,
) -> DistilledRecord:
    """Combine an accepted outcome with its source into a DistilledRecord."""
    if not outcome.status.accepted or outcome.kept_len is None:
        raise ValueError(f"record {source.id}: outcome {outcome.status.value} has no pruned response")
    if outcome.kept_indices is not None:
        pruned = build_subsequence_response(trace, outcome.kept_indices, cfg)
    else:
        pruned = build_pruned_response(trace, outcome.kept_len, cfg)
    orig_tokens = count_think_tokens(source.raw_response, counter, cfg)
    kept_tokens = count_think_tokens(pruned, counter, cfg)
    return DistilledRecord(
        id=source.id,
        question=source.question,
        full_response=source.raw_response,
        pruned_response=pruned,
        orig_steps=trace.n,
        kept_steps=outcome.kept_len,
        orig_tokens=orig_tokens,
        kept_tokens=kept_tokens,
        ratio=record_ratio(kept_tokens, orig_tokens),
        strategy=outcome.strategy,
        status=outcome.status,
        oracle_calls_count=outcome.call_count,
        kept_indices=outcome.kept_indices,
    )


# -- emission ---------------------------------------------------------------


@dataclass(frozen=True)
class SftRecord:
    id: str
    question: str
    response: str
    provenance: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "question": self.question, "response": self.response, "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SftRecord:
        return cls(data["id"], data["question"], data["response"], dict(data["provenance"]))


@dataclass(frozen=True)
class DpoRecord:
    id: str
    prompt: str
    chosen: str
    rejected: str
    meta: dict[str, Any] = field(
        default_factory=lambda: {"recommended_sft_loss_weight": SFT_LOSS_WEIGHT, "beta": DPO_BETA}
    )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> DpoRecord:
        return cls(data["id"], data["prompt"], data["chosen"], data["rejected"], dict(data["meta"]))


@dataclass
class EmitResult:
    count: int
    skipped: list[dict[str, Any]]


def _check_response(rec: DistilledRecord, cfg: SegmentationConfig) -> str | None:
    """Reason code when the pruned response is not a clean single-block response."""
    text = rec.pruned_response
    if text.count(cfg.think_open) != 1 or text.count(cfg.think_close) != 1:
        return "MalformedThinkBlock"
    try:
        trace = parse_response(text, cfg)
    except SegmentationError as exc:
        return exc.reason
    if trace.n != rec.kept_steps:
        return "ReparseMismatch"
    return None


def emit_sft(
    records: Iterable[DistilledRecord], path: str | Path, cfg: SegmentationConfig = DEFAULT_CONFIG
) -> EmitResult:
    rows: list[dict[str, Any]] = []
    skipped: list[dict[str, Any]] = []
    for rec in records:
        if not rec.status.accepted:
            skipped.append(skip_entry(rec.id, "sft", rec.status.value, strategy=rec.strategy.value))
            continue
        problem = _check_response(rec, cfg)
        if problem:
            skipped.append(skip_entry(rec.id, "sft", problem, strategy=rec.strategy.value))
            continue
        provenance = {
            "strategy": rec.strategy.value,
            "kept_steps": rec.kept_steps,
            "orig_steps": rec.orig_steps,
            "oracle_calls_count": rec.oracle_calls_count,
        }
        rows.append(SftRecord(rec.id, rec.question, rec.pruned_response, provenance).to_dict())
    return EmitResult(write_jsonl(path, rows), skipped)


def emit_dpo(
    records: Iterable[DistilledRecord],
    path: str | Path,
    counter: TokenCounter = WHITESPACE,
    cfg: SegmentationConfig = DEFAULT_CONFIG,
) -> EmitResult:
    """Pairs with chosen = pruned response, rejected = original response.

    Kept-full records carry no length contrast and are skipped, as are pairs
    whose chosen side is not strictly shorter than the rejected side.
    """
    rows: list[dict[str, Any]] = []
    skipped: list[dict[str, Any]] = []
    for rec in records:
        strategy = rec.strategy.value
        if not rec.status.accepted:
            skipped.append(skip_entry(rec.id, "dpo", rec.status.value, strategy=strategy))
            continue
        if rec.status is Status.KEPT_FULL:
            skipped.append(skip_entry(rec.id, "dpo", "KeptFullNoContrast", strategy=strategy))
            continue
        chosen, rejected = rec.pruned_response, rec.full_response
        if " ".join(chosen.split()) == " ".join(rejected.split()):
            skipped.append(skip_entry(rec.id, "dpo", "IdenticalPair", strategy=strategy))
            continue
        chosen_tokens, rejected_tokens = counter.count(chosen), counter.count(rejected)
        if chosen_tokens >= rejected_tokens:
            skipped.append(
                skip_entry(
                    rec.id,
                    "dpo",
                    "ChosenNotShorter",
                    f"{chosen_tokens} >= {rejected_tokens} tokens",
                    strategy=strategy,
                )
            )
            continue
        problem = _check_response(rec, cfg)
        if problem:
            skipped.append(skip_entry(rec.id, "dpo", problem, strategy=strategy))
            continue
        rows.append(DpoRecord(rec.id, rec.question, chosen, rejected).to_dict())
    return EmitResult(write_jsonl(path, rows), skipped)

