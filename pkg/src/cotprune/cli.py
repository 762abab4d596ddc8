"""Command-line pipeline: prune -> emit -> stats, plus eval and judge.

Each command reads or writes one output directory:

    distilled.jsonl      accepted records with pruned responses and token counts
    outcomes.jsonl       per-record search status and validator call log
    skips.jsonl          reason-coded skips from every stage
    sft.jsonl, dpo.jsonl training data (emit)
    stats-report.json    remaining-ratio statistics (stats)
    run-manifest.json    config snapshot, config hash, versions, counts
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import httpx

from cotprune import __version__
from cotprune.answer_matching import NORMALIZATION_VERSION
from cotprune.config import ConfigError, RunConfig, check_paths, config_from_dict, load_config
from cotprune.dataset_builder import (
    CorpusError,
    distill,
    emit_dpo,
    emit_sft,
    load_corpus,
    read_jsonl,
    skip_entry,
    write_jsonl,
)
from cotprune.eval_harness import (
    JudgeTemplate,
    ScoreMissing,
    ScoreOutOfRange,
    evaluate,
    judge_score,
    load_bench,
    mean_score,
    write_eval_outputs,
)
from cotprune.metrics import stats_report
from cotprune.oracle_client import (
    CACHE_FORMAT_VERSION,
    ChatClient,
    EndpointError,
    EndpointOracle,
    VerdictCache,
    render_onpolicy_prompt,
)
from cotprune.prune_search import Mode, parse_strategy, run_strategy
from cotprune.segmentation import SegmentationError, parse_response
from cotprune.trace_model import DistilledRecord, PruneOutcome, SourceRecord, Status, Strategy

logger = logging.getLogger("cotprune")

MANIFEST = "run-manifest.json"
DISTILLED = "distilled.jsonl"
OUTCOMES = "outcomes.jsonl"
SKIPS = "skips.jsonl"
STAGE_ORDER = ("ingest", "prune", "sft", "dpo")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def read_manifest(out_dir: str | Path) -> dict[str, Any]:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'cotprune prune' first")
    return json.loads(path.read_text(encoding="utf-8"))


def _config_from_manifest(manifest: dict[str, Any]) -> RunConfig:
    return config_from_dict(manifest["config"])


def replace_skips(out_dir: Path, stages: Sequence[str], entries: Sequence[dict[str, Any]]) -> None:
    """Swap the entries of ``stages`` in skips.jsonl, keeping other stages' entries."""
    path = out_dir / SKIPS
    kept = [e for e in read_jsonl(path) if e.get("stage") not in stages] if path.exists() else []
    merged = kept + list(entries)
    rank = {s: i for i, s in enumerate(STAGE_ORDER)}
    merged.sort(key=lambda e: rank.get(e.get("stage"), len(rank)))
    write_jsonl(path, merged)


def _record_seeds(records: Sequence[SourceRecord], seed: int) -> list[int]:
    # drawn in input order so parallel completion order cannot change them
    master = random.Random(seed)
    return [master.getrandbits(63) for _ in records]


def _outcome_row(source: SourceRecord, outcome: PruneOutcome) -> dict[str, Any]:
    return {
        "id": source.id,
        "strategy": outcome.strategy.value,
        "status": outcome.status.value,
        "n": outcome.n,
        "kept_len": outcome.kept_len,
        "kept_indices": None if outcome.kept_indices is None else list(outcome.kept_indices),
        "calls": [
            {"prefix_len": k, "valid": v.valid, "extracted": v.extracted} for k, v in outcome.oracle_calls
        ],
        "error_detail": outcome.error_detail,
    }


def cmd_prune(
    cfg: RunConfig,
    *,
    transport: httpx.BaseTransport | None = None,
    dry_run: bool = False,
) -> dict[str, Any]:
    """Parse, search and distill every record; returns the run manifest."""
    started = _now()
    check_paths(cfg, "input", "oracle_template")
    if cfg.input is None:
        raise ConfigError("no input corpus configured")
    template = cfg.prompt_template()
    counter = cfg.token_counter()
    seg = cfg.segmentation
    records, ingest_skips = load_corpus(cfg.input, cfg.fields)

    if dry_run:
        sample = None
        for rec in records:
            try:
                trace = parse_response(rec.raw_response, seg)
            except SegmentationError:
                continue
            sample = render_onpolicy_prompt(rec.question, trace.steps, template)
            break
        return {
            "dry_run": True,
            "n_records": len(records),
            "n_ingest_skips": len(ingest_skips),
            "sample_prompt": sample,
        }

    strategy = cfg.search.strategy
    needs_oracle = strategy is not Strategy.RANDOM or cfg.search.random_validate
    client = ChatClient(cfg.oracle, transport=transport) if needs_oracle else None
    cache = VerdictCache(cfg.resolved_cache_path) if needs_oracle else None
    seeds = _record_seeds(records, cfg.seed)

    def work(i: int) -> tuple[DistilledRecord | None, dict[str, Any] | None, dict[str, Any] | None]:
        source = records[i]
        try:
            trace = parse_response(source.raw_response, seg)
        except SegmentationError as exc:
            return None, None, skip_entry(source.id, "prune", exc.reason, str(exc), strategy=strategy.value)
        try:
            oracle = (
                EndpointOracle(source.question, source.gold_answer, source.id, client, template, cache)
                if client is not None
                else None
            )
            outcome = run_strategy(trace, oracle, cfg.search, rng_seed=seeds[i])
            row = _outcome_row(source, outcome)
            if not outcome.status.accepted:
                skip = skip_entry(
                    source.id, "prune", outcome.status.value, outcome.error_detail, strategy=strategy.value
                )
                return None, row, skip
            return distill(source, trace, outcome, counter, seg), row, None
        except Exception as exc:  # a bad record must not take the run down
            logger.exception("record %s failed", source.id)
            return None, None, skip_entry(source.id, "prune", "InternalError", repr(exc), strategy=strategy.value)

    try:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            results = list(pool.map(work, range(len(records))))
    finally:
        if client is not None:
            client.close()

    distilled = [d for d, _, _ in results if d is not None]
    outcomes = [o for _, o, _ in results if o is not None]
    prune_skips = [s for _, _, s in results if s is not None]

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / DISTILLED, (d.to_dict() for d in distilled))
    write_jsonl(out / OUTCOMES, outcomes)
    write_jsonl(out / SKIPS, [*ingest_skips, *prune_skips])
    for stale in ("sft.jsonl", "dpo.jsonl", "stats-report.json"):
        (out / stale).unlink(missing_ok=True)

    statuses = Counter(o["status"] for o in outcomes)
    manifest = {
        "tool": "cotprune",
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _now(),
        "config": cfg.snapshot(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "normalization": NORMALIZATION_VERSION,
            "oracle_template": template.version,
            "cache_format": CACHE_FORMAT_VERSION,
        },
        "seed": cfg.seed,
        "counts": {
            "records": len(records),
            "distilled": len(distilled),
            "statuses": dict(sorted(statuses.items())),
            "skips": dict(sorted(Counter(s["reason"] for s in [*ingest_skips, *prune_skips]).items())),
        },
        "network": {
            "requests_sent": client.requests_sent if client is not None else 0,
            "cache_hits": cache.hits if cache is not None else 0,
            "cache_misses": cache.misses if cache is not None else 0,
        },
        "outputs": {"distilled": DISTILLED, "outcomes": OUTCOMES, "skips": SKIPS},
    }
    _write_json(out / MANIFEST, manifest)
    return manifest


def _load_distilled(out_dir: Path) -> list[DistilledRecord]:
    path = out_dir / DISTILLED
    return [DistilledRecord.from_dict(row) for row in read_jsonl(path)] if path.exists() else []


def cmd_emit(out_dir: str | Path, kind: str) -> Path:
    """Write sft.jsonl or dpo.jsonl from the distilled records of a prune run."""
    if kind not in ("sft", "dpo"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    out = Path(out_dir)
    manifest = read_manifest(out)
    cfg = _config_from_manifest(manifest)
    records = _load_distilled(out)
    path = out / f"{kind}.jsonl"
    if kind == "sft":
        result = emit_sft(records, path, cfg.segmentation)
    else:
        result = emit_dpo(records, path, cfg.token_counter(), cfg.segmentation)
    replace_skips(out, [kind], result.skipped)
    manifest.setdefault("emitted", {})[kind] = {"count": result.count, "skipped": len(result.skipped)}
    _write_json(out / MANIFEST, manifest)
    return path


def cmd_stats(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    read_manifest(out)
    records = _load_distilled(out)
    rejected: Counter[str] = Counter()
    if (out / SKIPS).exists():
        for entry in read_jsonl(out / SKIPS):
            if entry.get("stage") == "prune" and entry.get("reason") == Status.REJECTED_FULL_INVALID.value:
                rejected[entry.get("strategy", "")] += 1
    report = stats_report(records, dict(rejected))
    path = out / "stats-report.json"
    _write_json(path, report)
    return path


def cmd_eval(cfg: RunConfig, *, transport: httpx.BaseTransport | None = None) -> dict[str, Any]:
    check_paths(cfg, "eval.input")
    if cfg.eval.input is None:
        raise ConfigError("eval.input is not configured")
    items = load_bench(cfg.eval.input)
    partial = cfg.out_dir / "eval-verdicts.partial.jsonl"
    with ChatClient(cfg.eval.endpoint, transport=transport) as client:
        report = evaluate(
            items,
            client,
            cfg.token_counter(),
            cfg.eval.extraction,
            instruction_prefix=cfg.eval.instruction_prefix,
            verdicts_path=partial,
            exclude_failed=cfg.eval.exclude_failed,
            workers=cfg.concurrency,
            seg=cfg.segmentation,
        )
    write_eval_outputs(report, cfg.out_dir)
    partial.unlink(missing_ok=True)
    return report.summary()


def cmd_judge(cfg: RunConfig, *, transport: httpx.BaseTransport | None = None) -> dict[str, Any]:
    check_paths(cfg, "judge.input", "judge.template")
    if cfg.judge.input is None:
        raise ConfigError("judge.input is not configured")
    template = (
        JudgeTemplate(cfg.judge.template.read_text(encoding="utf-8"))
        if cfg.judge.template is not None
        else JudgeTemplate.default()
    )
    rows = list(read_jsonl(cfg.judge.input))
    qf, rf = cfg.judge.question_field, cfg.judge.response_field

    def work(row: dict[str, Any]) -> dict[str, Any]:
        rid = str(row.get("id", ""))
        try:
            score = judge_score(row[qf], row[rf], client, template)
        except (ScoreMissing, ScoreOutOfRange, EndpointError, ValueError, KeyError) as exc:
            return {"id": rid, "score": None, "error": f"{type(exc).__name__}: {exc}"}
        return {"id": rid, "score": score, "error": None}

    with ChatClient(cfg.judge.endpoint, transport=transport) as client:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            scored = list(pool.map(work, rows))
    valid = [r["score"] for r in scored if r["score"] is not None]
    summary = {
        "mean_score": round(mean_score(valid), 4) if valid else None,
        "n_scored": len(valid),
        "n_errors": len(scored) - len(valid),
    }
    write_jsonl(cfg.out_dir / "judge-scores.jsonl", scored)
    _write_json(cfg.out_dir / "judge-report.json", summary)
    return summary


# -- argument parsing -------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON run config")
    p.add_argument("--input", type=Path, help="input JSON-lines file")
    p.add_argument("--out-dir", type=Path, help="output directory")
    p.add_argument("--max-in-flight", type=int, help="parallel workers and in-flight requests")
    p.add_argument("--seed", type=int)


def _resolve_config(args: argparse.Namespace, input_section: str | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    changes: dict[str, Any] = {"out_dir": args.out_dir, "seed": args.seed}
    if args.input is not None:
        if input_section is None:
            changes["input"] = args.input
        else:
            changes[input_section] = replace(getattr(cfg, input_section), input=args.input)
    if args.max_in_flight is not None:
        changes["concurrency"] = args.max_in_flight
        changes["oracle"] = replace(cfg.oracle, max_in_flight=args.max_in_flight)
    search_changes = {}
    if getattr(args, "strategy", None):
        search_changes["strategy"] = parse_strategy(args.strategy)
    if getattr(args, "mode", None):
        search_changes["mode"] = Mode(args.mode)
    if search_changes:
        changes["search"] = replace(cfg.search, **search_changes)
    return cfg.with_overrides(**changes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("prune", help="search pruned prefixes for every corpus record")
    _add_run_flags(p)
    p.add_argument("--strategy", choices=["binary", "fcs", "random"])
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--dry-run", action="store_true", help="count records and render one prompt, no network")

    p = sub.add_parser("emit", help="write sft.jsonl / dpo.jsonl from a prune run")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--kind", choices=["sft", "dpo", "both"], default="both")

    p = sub.add_parser("stats", help="write stats-report.json for a prune run")
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("eval", help="benchmark accuracy and thinking length")
    _add_run_flags(p)

    p = sub.add_parser("judge", help="LLM-as-judge scores for responses")
    _add_run_flags(p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.cmd == "prune":
            cfg = _resolve_config(args)
            result = cmd_prune(cfg, dry_run=args.dry_run)
            if args.dry_run:
                print(f"records: {result['n_records']} (ingest skips: {result['n_ingest_skips']})")
                print("sample prompt:")
                print(result["sample_prompt"] or "<no parseable record>")
            else:
                print(json.dumps(result["counts"], indent=2))
        elif args.cmd == "emit":
            kinds = ["sft", "dpo"] if args.kind == "both" else [args.kind]
            for kind in kinds:
                print(cmd_emit(args.out_dir, kind))
        elif args.cmd == "stats":
            print(cmd_stats(args.out_dir))
        elif args.cmd == "eval":
            print(json.dumps(cmd_eval(_resolve_config(args, "eval")), indent=2))
        elif args.cmd == "judge":
            print(json.dumps(cmd_judge(_resolve_config(args, "judge")), indent=2))
    except (ConfigError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
