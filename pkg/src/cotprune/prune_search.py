"""Prefix search strategies over a reasoning trace.

``binary_cut`` halves the prefix while the validator accepts it, and on the
first rejection searches upward over ``[mid, n]`` for a valid prefix. In the
default mode the upward search returns the first accepted midpoint, which is
not always the shortest valid prefix: with 16 steps and prefixes valid from 6
on, it returns 10. ``Mode.STRICT_BINARY`` is the
lower-bound binary search that finds the threshold exactly for monotone
validators.

``fcs_cut`` is the linear scan baseline and ``random_cut`` the random-deletion
baseline (keeps the first and last step, not a prefix).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Any

from cotprune.oracle_client import EndpointError, Oracle
from cotprune.trace_model import PruneOutcome, ReasoningTrace, Status, Strategy, ValidationVerdict


class Mode(str, Enum):
    PAPER_FAITHFUL = "paper-faithful"
    STRICT_BINARY = "strict-binary"


_STRATEGY_ALIASES = {"binary": Strategy.BINARY_CUT, "fcs": Strategy.FCS, "random": Strategy.RANDOM}


def parse_strategy(value: str | Strategy) -> Strategy:
    if isinstance(value, Strategy):
        return value
    return _STRATEGY_ALIASES.get(value.lower()) or Strategy(value)


@dataclass(frozen=True)
class SearchConfig:
    strategy: Strategy = Strategy.BINARY_CUT
    mode: Mode = Mode.PAPER_FAITHFUL
    precheck_full: bool = True
    random_keep_prob: float = 0.5
    random_seed: int = 0
    random_validate: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", parse_strategy(self.strategy))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0 < self.random_keep_prob < 1:
            raise ValueError("random_keep_prob must be in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy.value,
            "mode": self.mode.value,
            "precheck_full": self.precheck_full,
            "random_keep_prob": self.random_keep_prob,
            "random_seed": self.random_seed,
            "random_validate": self.random_validate,
        }


def max_binary_calls(n: int) -> int:
    """Upper bound on validator calls for binary_cut in the default mode, precheck included."""
    return 2 * math.ceil(math.log2(n)) + 2


class _Probe:
    """Wraps the validator on prefixes of one trace and logs every call."""

    def __init__(self, trace: ReasoningTrace, oracle: Oracle) -> None:
        self.trace = trace
        self.oracle = oracle
        self.calls: list[tuple[int, ValidationVerdict]] = []

    def __call__(self, k: int) -> bool:
        verdict = self.oracle(self.trace.prefix(k))
        self.calls.append((k, verdict))
        return verdict.valid


def _result(strategy: Strategy, probe: _Probe, kept: int) -> PruneOutcome:
    n = probe.trace.n
    return PruneOutcome(
        strategy=strategy,
        status=Status.PRUNED if kept < n else Status.KEPT_FULL,
        n=n,
        kept_len=kept,
        oracle_calls=tuple(probe.calls),
    )


def _terminal(strategy: Strategy, probe: _Probe, status: Status, detail: str | None = None) -> PruneOutcome:
    return PruneOutcome(
        strategy=strategy,
        status=status,
        n=probe.trace.n,
        oracle_calls=tuple(probe.calls),
        error_detail=detail,
    )


def _halve_then_backtrack(phi: _Probe, n: int) -> int:
    low, high, best = 1, n, n
    while low < high:
        mid = (low + high) // 2
        if phi(mid):
            best = mid
            high = mid
        else:
            break
    else:
        return best
    # backtracking over [mid, n]
    low, high = mid, n
    while low < high:
        mid = -(-(low + high) // 2)
        if phi(mid):
            return mid
        low = mid + 1
    return best


def _strict_binary(phi: _Probe, n: int) -> int:
    low, high = 1, n
    while low < high:
        mid = (low + high) // 2
        if phi(mid):
            high = mid
        else:
            low = mid + 1
    return high


def binary_cut(trace: ReasoningTrace, oracle: Oracle, cfg: SearchConfig | None = None) -> PruneOutcome:
    cfg = cfg or SearchConfig()
    phi = _Probe(trace, oracle)
    n = trace.n
    try:
        if cfg.precheck_full and not phi(n):
            return _terminal(Strategy.BINARY_CUT, phi, Status.REJECTED_FULL_INVALID)
        search = _strict_binary if cfg.mode is Mode.STRICT_BINARY else _halve_then_backtrack
        kept = search(phi, n)
    except EndpointError as exc:
        return _terminal(Strategy.BINARY_CUT, phi, Status.FAILED, str(exc))
    return _result(Strategy.BINARY_CUT, phi, kept)


def fcs_cut(trace: ReasoningTrace, oracle: Oracle, cfg: SearchConfig | None = None) -> PruneOutcome:
    phi = _Probe(trace, oracle)
    try:
        for k in range(1, trace.n + 1):
            if phi(k):
                return _result(Strategy.FCS, phi, k)
    except EndpointError as exc:
        return _terminal(Strategy.FCS, phi, Status.FAILED, str(exc))
    return _terminal(Strategy.FCS, phi, Status.REJECTED_FULL_INVALID)


def random_keep_indices(n: int, rng_seed: int, p: float) -> tuple[int, ...]:
    """0-based indices kept by random deletion; first and last always survive."""
    if n <= 2:
        return tuple(range(n))
    rng = random.Random(rng_seed)
    middle = [i for i in range(1, n - 1) if rng.random() < p]
    return (0, *middle, n - 1)


def random_cut(
    trace: ReasoningTrace,
    rng_seed: int,
    p: float = 0.5,
    validate_result: bool = False,
    oracle: Oracle | None = None,
) -> PruneOutcome:
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    if validate_result and oracle is None:
        raise ValueError("validate_result needs an oracle")
    indices = random_keep_indices(trace.n, rng_seed, p)
    kept = len(indices)
    status = Status.PRUNED if kept < trace.n else Status.KEPT_FULL
    calls: tuple[tuple[int, ValidationVerdict], ...] = ()
    if validate_result:
        assert oracle is not None
        try:
            verdict = oracle([trace.steps[i] for i in indices])
        except EndpointError as exc:
            return PruneOutcome(Strategy.RANDOM, Status.FAILED, trace.n, error_detail=str(exc))
        calls = ((kept, verdict),)
        if not verdict.valid:
            return PruneOutcome(
                Strategy.RANDOM,
                Status.REJECTED_FULL_INVALID,
                trace.n,
                oracle_calls=calls,
                error_detail="randomly pruned steps failed validation",
                kept_indices=indices,
            )
    return PruneOutcome(
        Strategy.RANDOM,
        status,
        trace.n,
        kept_len=kept,
        oracle_calls=calls,
        kept_indices=indices,
    )


def run_strategy(
    trace: ReasoningTrace, oracle: Oracle | None, cfg: SearchConfig, rng_seed: int | None = None
) -> PruneOutcome:
    """Dispatch on ``cfg.strategy``; ``rng_seed`` overrides ``cfg.random_seed``."""
    if cfg.strategy is Strategy.RANDOM:
        seed = cfg.random_seed if rng_seed is None else rng_seed
        return random_cut(trace, seed, cfg.random_keep_prob, cfg.random_validate, oracle)
    if oracle is None:
        raise ValueError(f"{cfg.strategy.value} needs an oracle")
    if cfg.strategy is Strategy.FCS:
        return fcs_cut(trace, oracle, cfg)
    return binary_cut(trace, oracle, cfg)
