"""Core value types shared across the pipeline.

- SourceRecord: one corpus entry (question, gold answer, raw response).
- ReasoningTrace: a parsed response, ordered steps plus the summary text.
- ValidationVerdict: the outcome of one validator call on a step list.
- PruneOutcome: the result of running a pruning strategy over one trace.
- DistilledRecord: (question, full response, pruned response) with token accounting.

Every type is a frozen dataclass and round-trips through ``to_dict`` / ``from_dict``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class Strategy(str, Enum):
    BINARY_CUT = "BinaryCut"
    FCS = "FCS"
    RANDOM = "Random"


class Status(str, Enum):
    PRUNED = "Pruned"
    KEPT_FULL = "KeptFull"
    REJECTED_FULL_INVALID = "RejectedFullInvalid"
    FAILED = "Failed"

    @property
    def accepted(self) -> bool:
        return self in (Status.PRUNED, Status.KEPT_FULL)


def derive_record_id(question: str, raw_response: str) -> str:
    """Stable id for records that arrive without one."""
    digest = hashlib.sha256(f"{question}\x00{raw_response}".encode("utf-8")).hexdigest()
    return f"rec-{digest[:16]}"


@dataclass(frozen=True)
class SourceRecord:
    id: str
    question: str
    gold_answer: str
    raw_response: str
    meta: dict[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("SourceRecord.id must be non-empty")
        if not self.gold_answer.strip():
            raise ValueError(f"record {self.id}: gold_answer is empty")

    @classmethod
    def create(
        cls,
        question: str,
        gold_answer: str,
        raw_response: str,
        id: str | None = None,
        meta: dict[str, Any] | None = None,
    ) -> SourceRecord:
        return cls(
            id=id or derive_record_id(question, raw_response),
            question=question,
            gold_answer=gold_answer,
            raw_response=raw_response,
            meta=dict(meta or {}),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "raw_response": self.raw_response,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SourceRecord:
        return cls(
            id=data["id"],
            question=data["question"],
            gold_answer=data["gold_answer"],
            raw_response=data["raw_response"],
            meta=dict(data.get("meta") or {}),
        )


@dataclass(frozen=True)
class ReasoningTrace:
    steps: tuple[str, ...]
    summary: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a reasoning trace needs at least one step")
        for i, step in enumerate(self.steps):
            if not step.strip():
                raise ValueError(f"step {i + 1} is empty")

    @property
    def n(self) -> int:
        return len(self.steps)

    def prefix(self, k: int) -> tuple[str, ...]:
        return self.steps[:k]

    def to_dict(self) -> dict[str, Any]:
        return {"steps": list(self.steps), "summary": self.summary, "n": self.n}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ReasoningTrace:
        return cls(steps=tuple(data["steps"]), summary=data.get("summary", ""))


@dataclass(frozen=True)
class ValidationVerdict:
    """One validator call.

    ``valid`` is only ever true when an answer was extracted and matched gold.
    """

    prefix_len: int
    rendered_prompt: str
    raw_completion: str
    extracted: str | None
    valid: bool
    from_cache: bool = False
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.valid and self.extracted is None:
            raise ValueError("a valid verdict must carry an extracted answer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "prefix_len": self.prefix_len,
            "rendered_prompt": self.rendered_prompt,
            "raw_completion": self.raw_completion,
            "extracted": self.extracted,
            "valid": self.valid,
            "from_cache": self.from_cache,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ValidationVerdict:
        return cls(
            prefix_len=int(data["prefix_len"]),
            rendered_prompt=data["rendered_prompt"],
            raw_completion=data["raw_completion"],
            extracted=data.get("extracted"),
            valid=bool(data["valid"]),
            from_cache=bool(data.get("from_cache", False)),
            latency_ms=int(data.get("latency_ms", 0)),
        )


@dataclass(frozen=True)
class PruneOutcome:
    strategy: Strategy
    status: Status
    n: int
    kept_len: int | None = None
    oracle_calls: tuple[tuple[int, ValidationVerdict], ...] = ()
    error_detail: str | None = None
    # set only for non-prefix results (Random); 0-based step indices
    kept_indices: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "status", Status(self.status))
        object.__setattr__(self, "oracle_calls", tuple((int(k), v) for k, v in self.oracle_calls))
        if self.kept_indices is not None:
            object.__setattr__(self, "kept_indices", tuple(self.kept_indices))
        if self.status.accepted:
            if self.kept_len is None:
                raise ValueError(f"status {self.status.value} requires kept_len")
            if not 1 <= self.kept_len <= self.n:
                raise ValueError(f"kept_len {self.kept_len} outside [1, {self.n}]")
        elif self.kept_len is not None:
            raise ValueError(f"status {self.status.value} must not carry kept_len")

    @property
    def call_count(self) -> int:
        return len(self.oracle_calls)

    def confirmed(self, k: int) -> bool:
        """True when the last verdict recorded for prefix length ``k`` was valid."""
        verdicts = [v for length, v in self.oracle_calls if length == k]
        return bool(verdicts) and verdicts[-1].valid

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "status": self.status.value,
            "n": self.n,
            "kept_len": self.kept_len,
            "oracle_calls": [[k, v.to_dict()] for k, v in self.oracle_calls],
            "error_detail": self.error_detail,
            "kept_indices": None if self.kept_indices is None else list(self.kept_indices),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PruneOutcome:
        indices = data.get("kept_indices")
        return cls(
            strategy=Strategy(data["strategy"]),
            status=Status(data["status"]),
            n=int(data["n"]),
            kept_len=data.get("kept_len"),
            oracle_calls=tuple(
                (int(k), ValidationVerdict.from_dict(v)) for k, v in data.get("oracle_calls", [])
            ),
            error_detail=data.get("error_detail"),
            kept_indices=None if indices is None else tuple(indices),
        )


@dataclass(frozen=True)
class DistilledRecord:
    id: str
    question: str
    full_response: str
    pruned_response: str
    orig_steps: int
    kept_steps: int
    orig_tokens: int
    kept_tokens: int
    ratio: float
    strategy: Strategy = Strategy.BINARY_CUT
    status: Status = Status.PRUNED
    oracle_calls_count: int = 0
    kept_indices: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "status", Status(self.status))
        if self.kept_indices is not None:
            object.__setattr__(self, "kept_indices", tuple(self.kept_indices))
        if self.kept_steps > self.orig_steps:
            raise ValueError(f"record {self.id}: kept_steps exceeds orig_steps")
        if self.status.accepted and not 0 < self.ratio <= 1:
            raise ValueError(f"record {self.id}: ratio {self.ratio} outside (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "full_response": self.full_response,
            "pruned_response": self.pruned_response,
            "orig_steps": self.orig_steps,
            "kept_steps": self.kept_steps,
            "orig_tokens": self.orig_tokens,
            "kept_tokens": self.kept_tokens,
            "ratio": self.ratio,
            "strategy": self.strategy.value,
            "status": self.status.value,
            "oracle_calls_count": self.oracle_calls_count,
            "kept_indices": None if self.kept_indices is None else list(self.kept_indices),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DistilledRecord:
        indices = data.get("kept_indices")
        return cls(
            id=data["id"],
            question=data["question"],
            full_response=data["full_response"],
            pruned_response=data["pruned_response"],
            orig_steps=int(data["orig_steps"]),
            kept_steps=int(data["kept_steps"]),
            orig_tokens=int(data["orig_tokens"]),
            kept_tokens=int(data["kept_tokens"]),
            ratio=float(data["ratio"]),
            strategy=Strategy(data.get("strategy", Strategy.BINARY_CUT.value)),
            status=Status(data.get("status", Status.PRUNED.value)),
            oracle_calls_count=int(data.get("oracle_calls_count", 0)),
            kept_indices=None if indices is None else tuple(indices),
        )
