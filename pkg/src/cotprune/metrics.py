"""Token accounting and remaining-ratio statistics.

Counts are over the think-block interior only. The default counter splits on
whitespace, which will not agree with a model tokenizer; use an external
counter for tokenizer-level numbers.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
from dataclasses import dataclass
from enum import Enum
from statistics import fmean
from typing import Any, Callable, Iterable, Sequence

from cotprune.segmentation import DEFAULT_CONFIG, SegmentationConfig, SegmentationError, locate_think_block
from cotprune.trace_model import DistilledRecord

logger = logging.getLogger(__name__)

N_BINS = 10


class CounterMode(str, Enum):
    WHITESPACE = "whitespace"
    CHAR_APPROX = "char-approx"
    EXTERNAL = "external"


class ZeroOriginal(ValueError):
    pass


class RatioOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class TokenCounter:
    """Counts tokens in a string.

    ``EXTERNAL`` delegates to ``func`` if given, otherwise to ``command``: a
    shell command that reads the text on stdin and prints an integer.
    """

    mode: CounterMode = CounterMode.WHITESPACE
    command: str | None = None
    func: Callable[[str], int] | None = None
    chars_per_token: float = 4.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", CounterMode(self.mode))
        if self.mode is CounterMode.EXTERNAL and self.func is None and not self.command:
            raise ValueError("external token counter needs a command or a function")

    def count(self, text: str) -> int:
        if not text:
            return 0
        if self.mode is CounterMode.WHITESPACE:
            return len(text.split())
        if self.mode is CounterMode.CHAR_APPROX:
            return math.ceil(len(text) / self.chars_per_token)
        if self.func is not None:
            n = int(self.func(text))
        else:
            assert self.command is not None
            out = subprocess.run(
                shlex.split(self.command), input=text, capture_output=True, text=True, check=True
            )
            n = int(out.stdout.strip())
        if n < 0:
            raise ValueError(f"external counter returned {n}")
        return n

    def describe(self) -> dict[str, Any]:
        return {"mode": self.mode.value, "command": self.command}


WHITESPACE = TokenCounter()


def think_interior(text: str, cfg: SegmentationConfig = DEFAULT_CONFIG) -> str | None:
    """Think-block interior, or None when the text has no complete think block."""
    try:
        interior, _ = locate_think_block(text, cfg)
    except SegmentationError:
        return None
    return interior


def count_think_tokens(
    text: str, counter: TokenCounter = WHITESPACE, cfg: SegmentationConfig = DEFAULT_CONFIG
) -> int:
    if not text:
        return 0
    interior = think_interior(text, cfg)
    if interior is None:
        logger.warning("no think block found; counting 0 think tokens")
        return 0
    return counter.count(interior)


def record_ratio(kept_tokens: int, orig_tokens: int) -> float:
    if orig_tokens <= 0:
        raise ZeroOriginal("original token count must be positive")
    return kept_tokens / orig_tokens


def corpus_ratio(orig_mean: float, remaining_mean: float) -> float:
    """Ratio of corpus means as a percentage, rounded to two decimals."""
    if orig_mean <= 0:
        raise ZeroOriginal("original mean must be positive")
    return round(remaining_mean / orig_mean * 100, 2)


def bucket_distribution(ratios: Iterable[float]) -> list[int]:
    """Counts over [0,10), [10,20), ..., [90,100]; 100 lands in the last bin."""
    bins = [0] * N_BINS
    for r in ratios:
        if not 0 <= r <= 100 or math.isnan(r):
            raise RatioOutOfRange(f"ratio {r} outside [0, 100]")
        bins[min(int(r // 10), N_BINS - 1)] += 1
    return bins


def bin_labels() -> list[str]:
    return [f"[{10 * i},{10 * i + 10})" for i in range(N_BINS - 1)] + ["[90,100]"]


def answer_in_last_steps_fraction(records: Sequence[DistilledRecord], window: int = 10) -> float | None:
    """Fraction of records whose kept prefix ends within the last ``window`` steps."""
    if not records:
        return None
    hits = sum(1 for r in records if r.kept_steps > r.orig_steps - window)
    return hits / len(records)


def strategy_stats(records: Sequence[DistilledRecord], n_rejected: int = 0) -> dict[str, Any]:
    if records:
        orig_mean = fmean(r.orig_tokens for r in records)
        remaining_mean = fmean(r.kept_tokens for r in records)
        ratio = corpus_ratio(orig_mean, remaining_mean) if orig_mean > 0 else None
    else:
        orig_mean = remaining_mean = 0.0
        ratio = None
    return {
        "orig_mean": round(orig_mean, 2),
        "remaining_mean": round(remaining_mean, 2),
        "ratio": ratio,
        "bins": bucket_distribution(r.ratio * 100 for r in records),
        "n_records": len(records),
        "n_rejected": n_rejected,
        "answer_in_last_10_steps": answer_in_last_steps_fraction(records),
    }


def stats_report(
    records: Sequence[DistilledRecord], rejected_by_strategy: dict[str, int] | None = None
) -> dict[str, Any]:
    """Per-strategy summary: means, corpus ratio, ratio histogram, counts."""
    rejected_by_strategy = rejected_by_strategy or {}
    groups: dict[str, list[DistilledRecord]] = {}
    for rec in records:
        groups.setdefault(rec.strategy.value, []).append(rec)
    names = sorted(set(groups) | set(rejected_by_strategy))
    return {
        "bin_labels": bin_labels(),
        "strategies": {
            name: strategy_stats(groups.get(name, []), rejected_by_strategy.get(name, 0)) for name in names
        },
    }
