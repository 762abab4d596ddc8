from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field
from typing import Callable

import httpx
import pytest

from cotprune.trace_model import ReasoningTrace

STEPS_HEADER = "The thinking steps are given below:\n"
QUESTION_HEADER = "Now, here is the problem:\n"


def make_trace(n: int, summary: str = "S") -> ReasoningTrace:
    return ReasoningTrace(tuple(f"step {i}" for i in range(1, n + 1)), summary)


def parse_validation_prompt(prompt: str) -> tuple[str, list[str]]:
    """Recover (question, steps) from a prompt rendered with the default template."""
    q_start = prompt.index(QUESTION_HEADER) + len(QUESTION_HEADER)
    s_start = prompt.index(STEPS_HEADER)
    question = prompt[q_start:s_start].rstrip("\n")
    steps_text = prompt[s_start + len(STEPS_HEADER):].rstrip("\n")
    return question, steps_text.split("\n\n")


@dataclass
class MockEndpoint:
    """Chat-completions double: ``answer(prompt) -> completion text``.

    ``fail_times`` makes the first N requests return HTTP 503.
    """

    answer: Callable[[str], str]
    fail_times: int = 0
    status_on_fail: int = 503
    requests: list[dict] = field(default_factory=list)
    in_flight: int = 0
    max_seen_in_flight: int = 0
    delay: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def handler(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        with self._lock:
            self.requests.append(body)
            self.in_flight += 1
            self.max_seen_in_flight = max(self.max_seen_in_flight, self.in_flight)
            failing = len(self.requests) <= self.fail_times
        try:
            if self.delay:
                threading.Event().wait(self.delay)
            if failing:
                return httpx.Response(self.status_on_fail, json={"error": "unavailable"})
            prompt = body["messages"][-1]["content"]
            text = self.answer(prompt)
            return httpx.Response(
                200,
                json={
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
                    "usage": {"completion_tokens": len(text.split())},
                },
            )
        finally:
            with self._lock:
                self.in_flight -= 1

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handler)


@dataclass(frozen=True)
class SyntheticItem:
    id: str
    question: str
    gold: str
    n_steps: int
    threshold: int  # smallest step count the mock model answers correctly from


def synthetic_corpus(n_records: int = 20, seed: int = 7) -> list[SyntheticItem]:
    rng = random.Random(seed)
    items = []
    for i in range(n_records):
        n = rng.randint(1, 24)
        # thresholds above n make the full trace invalid
        threshold = rng.randint(1, n + 2)
        items.append(SyntheticItem(f"r{i:02d}", f"Problem {i}: compute value {i}.", str(100 + i), n, threshold))
    return items


def corpus_row(item: SyntheticItem) -> dict:
    steps = "\n\n".join(f"Record {item.id} reasoning step {j} with some words." for j in range(1, item.n_steps + 1))
    response = f"<think>\n{steps}\n</think>\n\nThe answer is \\boxed{{{item.gold}}}."
    return {"id": item.id, "question": item.question, "answer": item.gold, "response": response}


def threshold_endpoint(items: list[SyntheticItem]) -> MockEndpoint:
    """Mock model that answers correctly iff it sees at least ``threshold`` steps."""
    by_question = {it.question: it for it in items}

    def answer(prompt: str) -> str:
        question, steps = parse_validation_prompt(prompt)
        item = by_question[question]
        if len(steps) >= item.threshold:
            return f"###Answer: {item.gold}"
        return "###Answer: -1"

    return MockEndpoint(answer)


def write_corpus(path, rows) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


@pytest.fixture
def corpus_items() -> list[SyntheticItem]:
    return synthetic_corpus()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" and outcome != "error":
                continue
            crit = getattr(rep, "acceptance", None)
            if crit is None:
                continue
            lines.append((crit[0], "PASS" if outcome == "passed" else "FAIL", crit[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, verdict, title in sorted(lines):
            terminalreporter.write_line(f"[{verdict}] criterion {number:>2}: {title}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep.acceptance = (marker.args[0], marker.args[1])
