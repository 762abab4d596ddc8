from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cotprune.dataset_builder import render_response
from cotprune.segmentation import (
    SINGLE_NEWLINE,
    EmptyThinkBlock,
    MissingCloseTag,
    MissingOpenTag,
    SegmentationConfig,
    join_steps,
    parse_response,
    split_steps,
)


def test_parse_basic() -> None:
    raw = "<think>\nFirst.\n\nSecond.\n\n\nThird.\n</think>\n\nSo 42."
    trace = parse_response(raw)
    assert trace.steps == ("First.", "Second.", "Third.")
    assert trace.summary == "So 42."


def test_whitespace_only_lines_count_as_blank() -> None:
    assert split_steps("a\n  \nb\n\t\n\nc") == ["a", "b", "c"]


def test_single_newline_keeps_lines_together() -> None:
    assert split_steps("a\nb\n\nc") == ["a\nb", "c"]


def test_single_newline_separator() -> None:
    cfg = SegmentationConfig(step_separator=SINGLE_NEWLINE)
    assert split_steps("a\nb\n\nc", cfg) == ["a", "b", "c"]


def test_literal_separator_and_custom_tags() -> None:
    cfg = SegmentationConfig("[T]", "[/T]", "||")
    trace = parse_response("[T] x || y ||  [/T] done", cfg)
    assert trace.steps == ("x", "y") and trace.summary == "done"


def test_text_before_open_tag_is_ignored() -> None:
    trace = parse_response("preamble <think>a\n\nb</think>after")
    assert trace.steps == ("a", "b") and trace.summary == "after"


def test_first_block_only() -> None:
    trace = parse_response("<think>a</think>mid<think>b</think>end")
    assert trace.steps == ("a",)
    assert trace.summary == "mid<think>b</think>end"


@pytest.mark.parametrize(
    "raw, exc, reason",
    [
        ("no tags here", MissingOpenTag, "MissingOpenTag"),
        ("<think>never closed", MissingCloseTag, "MissingCloseTag"),
        ("<think> \n\n </think> x", EmptyThinkBlock, "EmptyThinkBlock"),
    ],
)
def test_errors(raw: str, exc: type, reason: str) -> None:
    with pytest.raises(exc) as info:
        parse_response(raw)
    assert info.value.reason == reason


def test_empty_inputs() -> None:
    with pytest.raises(ValueError):
        parse_response("")
    with pytest.raises(ValueError):
        split_steps("   ")


def test_config_validation() -> None:
    with pytest.raises(ValueError):
        SegmentationConfig(think_open="")
    with pytest.raises(ValueError):
        SegmentationConfig(think_open="x", think_close="x")
    with pytest.raises(ValueError):
        SegmentationConfig(step_separator="")


step_text = st.text(alphabet=st.characters(blacklist_characters="<>\n\r"), min_size=1, max_size=30).filter(
    lambda s: s.strip() != ""
)


@given(st.lists(step_text, min_size=1, max_size=10), step_text)
def test_render_parse_roundtrip(steps: list[str], summary: str) -> None:
    steps = [s.strip() for s in steps]
    trace = parse_response(render_response(steps, summary))
    assert list(trace.steps) == steps
    assert trace.n >= 1


@given(st.text(min_size=1).filter(lambda s: s.strip() != ""))
def test_split_is_idempotent(text: str) -> None:
    steps = split_steps(text)
    assert len(steps) >= 1
    assert split_steps(join_steps(steps)) == steps
