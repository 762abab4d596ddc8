"""Think-block extraction and step splitting."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

from cotprune.trace_model import ReasoningTrace


class SegmentationError(ValueError):
    """The raw response cannot be turned into a trace; the record is unusable."""

    reason = "SegmentationError"


class MissingOpenTag(SegmentationError):
    reason = "MissingOpenTag"


class MissingCloseTag(SegmentationError):
    reason = "MissingCloseTag"


class EmptyThinkBlock(SegmentationError):
    reason = "EmptyThinkBlock"


BLANK_LINE = "\n\n"
SINGLE_NEWLINE = "\n"


@dataclass(frozen=True)
class SegmentationConfig:
    """Tags around the thinking part and the step boundary.

    A separator made only of newlines (``"\\n\\n"`` by default) matches runs of
    that many or more line breaks, with whitespace-only lines counting as
    blank. Any other separator is matched literally.
    """

    think_open: str = "<think>"
    think_close: str = "</think>"
    step_separator: str = BLANK_LINE

    def __post_init__(self) -> None:
        if not self.think_open or not self.think_close:
            raise ValueError("think tags must be non-empty")
        if self.think_open == self.think_close:
            raise ValueError("think_open and think_close must differ")
        if not self.step_separator:
            raise ValueError("step_separator must be non-empty")

    @cached_property
    def _boundary(self) -> re.Pattern[str]:
        sep = self.step_separator
        if set(sep) == {"\n"}:
            return re.compile(r"(?:[ \t\r\f\v]*\n){%d,}" % len(sep))
        return re.compile(re.escape(sep))

    def to_dict(self) -> dict[str, str]:
        return {
            "think_open": self.think_open,
            "think_close": self.think_close,
            "step_separator": self.step_separator,
        }


DEFAULT_CONFIG = SegmentationConfig()


def split_steps(thinking: str, cfg: SegmentationConfig = DEFAULT_CONFIG) -> list[str]:
    """Split the thinking text into trimmed, non-empty steps in order."""
    if not thinking.strip():
        raise ValueError("thinking text has no content")
    fragments = cfg._boundary.split(thinking)
    return [frag.strip() for frag in fragments if frag.strip()]


def join_steps(steps: list[str] | tuple[str, ...], cfg: SegmentationConfig = DEFAULT_CONFIG) -> str:
    return cfg.step_separator.join(steps)


def locate_think_block(raw: str, cfg: SegmentationConfig = DEFAULT_CONFIG) -> tuple[str, str]:
    """Return ``(interior, after)`` for the first think block.

    Later think tags are left in place as plain text.
    """
    start = raw.find(cfg.think_open)
    if start < 0:
        raise MissingOpenTag(f"no {cfg.think_open!r} tag found")
    body_start = start + len(cfg.think_open)
    end = raw.find(cfg.think_close, body_start)
    if end < 0:
        raise MissingCloseTag(f"no {cfg.think_close!r} after the opening tag")
    return raw[body_start:end], raw[end + len(cfg.think_close):]


def parse_response(raw: str, cfg: SegmentationConfig = DEFAULT_CONFIG) -> ReasoningTrace:
    if not raw:
        raise ValueError("raw response is empty")
    interior, after = locate_think_block(raw, cfg)
    if not interior.strip():
        raise EmptyThinkBlock("think block contains only whitespace")
    return ReasoningTrace(steps=tuple(split_steps(interior, cfg)), summary=after.strip())
