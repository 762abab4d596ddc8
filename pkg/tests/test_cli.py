from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import yaml

from conftest import corpus_row, parse_validation_prompt, synthetic_corpus, threshold_endpoint, write_corpus
from cotprune import cli
from cotprune.cli import cmd_emit, cmd_prune, cmd_stats, main, read_manifest, replace_skips
from cotprune.config import ConfigError, config_from_dict, load_config
from cotprune.dataset_builder import read_jsonl


def _cfg(tmp_path, **extra):
    data = {
        "input": str(tmp_path / "corpus.jsonl"),
        "out_dir": str(tmp_path / "out"),
        "oracle": {"max_retries": 0},
        "concurrency": 4,
        **extra,
    }
    return config_from_dict(data)


def _linear_reference(item) -> tuple[str, int | None]:
    # brute force over prefixes of the mock model's behaviour
    if item.threshold > item.n_steps:
        return "RejectedFullInvalid", None
    return ("KeptFull" if item.threshold == item.n_steps else "Pruned"), item.threshold


def test_prune_statuses_match_reference(tmp_path) -> None:
    items = synthetic_corpus(20)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    manifest = cmd_prune(_cfg(tmp_path, search={"strategy": "FCS"}), transport=threshold_endpoint(items).transport)
    outcomes = {o["id"]: o for o in read_jsonl(tmp_path / "out" / "outcomes.jsonl")}
    assert len(outcomes) == 20
    for item in items:
        status, kept = _linear_reference(item)
        assert outcomes[item.id]["status"] == status, item
        assert outcomes[item.id]["kept_len"] == kept
    assert manifest["counts"]["records"] == 20


def test_binary_statuses_agree_on_validity(tmp_path) -> None:
    items = synthetic_corpus(20)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    cmd_prune(_cfg(tmp_path), transport=threshold_endpoint(items).transport)
    outcomes = {o["id"]: o for o in read_jsonl(tmp_path / "out" / "outcomes.jsonl")}
    for item in items:
        out = outcomes[item.id]
        if item.threshold > item.n_steps:
            assert out["status"] == "RejectedFullInvalid"
        else:
            assert item.threshold <= out["kept_len"] <= item.n_steps
    skips = list(read_jsonl(tmp_path / "out" / "skips.jsonl"))
    rejected = sum(it.threshold > it.n_steps for it in items)
    assert sum(s["reason"] == "RejectedFullInvalid" for s in skips) == rejected


def test_malformed_record_is_skipped(tmp_path) -> None:
    items = synthetic_corpus(20)
    rows = [corpus_row(it) for it in items]
    rows[4]["response"] = rows[4]["response"].replace("<think>", "")
    write_corpus(tmp_path / "corpus.jsonl", rows)
    cmd_prune(_cfg(tmp_path), transport=threshold_endpoint(items).transport)
    outcomes = list(read_jsonl(tmp_path / "out" / "outcomes.jsonl"))
    skips = [s for s in read_jsonl(tmp_path / "out" / "skips.jsonl") if s["reason"] == "MissingOpenTag"]
    assert len(outcomes) == 19
    assert [s["id"] for s in skips] == [items[4].id]


def test_warm_cache_rerun(tmp_path) -> None:
    items = synthetic_corpus(20)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    cfg = _cfg(tmp_path)
    first = cmd_prune(cfg, transport=threshold_endpoint(items).transport)
    before = (tmp_path / "out" / "distilled.jsonl").read_bytes()
    ep = threshold_endpoint(items)
    second = cmd_prune(cfg, transport=ep.transport)
    assert ep.requests == [] and second["network"]["requests_sent"] == 0
    # repeated probes within a record already hit the cache on the first run
    net = first["network"]
    assert second["network"]["cache_hits"] == net["cache_hits"] + net["cache_misses"]
    assert (tmp_path / "out" / "distilled.jsonl").read_bytes() == before
    assert second["config_hash"] == first["config_hash"]


def test_random_strategy_is_seeded(tmp_path) -> None:
    items = synthetic_corpus(10)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    runs = []
    for name, workers in (("a", 1), ("b", 6)):
        cfg = _cfg(tmp_path, out_dir=str(tmp_path / name), concurrency=workers,
                   search={"strategy": "Random", "random_validate": False}, seed=3)
        cmd_prune(cfg)
        runs.append((tmp_path / name / "distilled.jsonl").read_bytes())
    assert runs[0] == runs[1]


def test_emit_and_stats(tmp_path) -> None:
    items = synthetic_corpus(20)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    cmd_prune(_cfg(tmp_path), transport=threshold_endpoint(items).transport)
    out = tmp_path / "out"
    sft = cmd_emit(out, "sft")
    dpo = cmd_emit(out, "dpo")
    report = json.loads(cmd_stats(out).read_text())
    n_distilled = len(list(read_jsonl(out / "distilled.jsonl")))
    assert len(list(read_jsonl(sft))) == n_distilled
    assert len(list(read_jsonl(dpo))) <= n_distilled
    binary = report["strategies"]["BinaryCut"]
    assert binary["n_records"] == n_distilled and sum(binary["bins"]) == n_distilled
    assert binary["n_rejected"] == sum(it.threshold > it.n_steps for it in items)
    assert read_manifest(out)["emitted"]["sft"]["count"] == n_distilled
    with pytest.raises(ConfigError):
        cmd_emit(out, "rl")


def test_replace_skips_is_stage_scoped(tmp_path) -> None:
    (tmp_path / "skips.jsonl").write_text(
        '{"id": "a", "stage": "dpo", "reason": "X"}\n{"id": "b", "stage": "prune", "reason": "Y"}\n'
    )
    replace_skips(tmp_path, ["dpo"], [{"id": "c", "stage": "dpo", "reason": "Z"}])
    rows = list(read_jsonl(tmp_path / "skips.jsonl"))
    assert [(r["id"], r["stage"]) for r in rows] == [("b", "prune"), ("c", "dpo")]


def test_dry_run_makes_no_requests(tmp_path) -> None:
    items = synthetic_corpus(5)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    ep = threshold_endpoint(items)
    result = cmd_prune(_cfg(tmp_path), transport=ep.transport, dry_run=True)
    assert result["n_records"] == 5 and ep.requests == []
    question, steps = parse_validation_prompt(result["sample_prompt"])
    assert question == items[0].question and len(steps) == items[0].n_steps
    assert not (tmp_path / "out").exists()


def test_load_config_yaml_relative_paths(tmp_path) -> None:
    (tmp_path / "conf").mkdir()
    path = tmp_path / "conf" / "run.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "input": "data.jsonl",
                "out_dir": "out",
                "fields": {"question": "problem"},
                "search": {"strategy": "FCS", "mode": "strict-binary"},
                "oracle": {"model_name": "m", "base_url": "http://x/v1"},
                "eval": {"extraction": "boxed"},
            }
        )
    )
    cfg = load_config(path)
    assert cfg.input == (tmp_path / "conf" / "data.jsonl").resolve()
    assert cfg.fields.question == "problem" and cfg.oracle.model_name == "m"
    assert cfg.resolved_cache_path == cfg.out_dir / "oracle-cache.jsonl"
    assert cfg.config_hash() == load_config(path).config_hash()
    assert cfg.config_hash() != cfg.with_overrides(seed=9).config_hash()


def test_config_errors(tmp_path) -> None:
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"oracle": {"nope": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"search": {"strategy": "greedy"}})
    assert main(["prune", "--input", str(tmp_path / "missing.jsonl"), "--out-dir", str(tmp_path)]) == 2


def test_main_dry_run(tmp_path, capsys) -> None:
    items = synthetic_corpus(3)
    write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
    code = main(["prune", "--input", str(tmp_path / "corpus.jsonl"), "--out-dir", str(tmp_path / "o"), "--dry-run"])
    assert code == 0
    assert "records: 3" in capsys.readouterr().out


def test_main_overrides(tmp_path) -> None:
    args = cli.build_parser().parse_args(
        ["prune", "--out-dir", str(tmp_path), "--strategy", "fcs", "--mode", "strict-binary", "--max-in-flight", "2"]
    )
    cfg = cli._resolve_config(args)
    assert cfg.search.strategy.value == "FCS" and cfg.search.mode.value == "strict-binary"
    assert cfg.concurrency == 2 and cfg.oracle.max_in_flight == 2


class _Handler(BaseHTTPRequestHandler):
    items: dict = {}

    def do_POST(self) -> None:
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        question, steps = parse_validation_prompt(body["messages"][0]["content"])
        item = self.items[question]
        answer = item.gold if len(steps) >= item.threshold else "-1"
        payload = json.dumps({"choices": [{"message": {"content": f"###Answer: {answer}"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args) -> None:
        pass


def test_full_cli_against_local_http_server(tmp_path, capsys) -> None:
    items = synthetic_corpus(8)
    _Handler.items = {it.question: it for it in items}
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        write_corpus(tmp_path / "corpus.jsonl", [corpus_row(it) for it in items])
        conf = tmp_path / "run.yaml"
        conf.write_text(
            yaml.safe_dump(
                {
                    "input": "corpus.jsonl",
                    "out_dir": "out",
                    "oracle": {"base_url": f"http://127.0.0.1:{server.server_port}/v1", "max_retries": 0},
                }
            )
        )
        assert main(["prune", "--config", str(conf)]) == 0
        assert main(["emit", "--out-dir", str(tmp_path / "out")]) == 0
        assert main(["stats", "--out-dir", str(tmp_path / "out")]) == 0
    finally:
        server.shutdown()
        server.server_close()
    out = tmp_path / "out"
    for name in ("distilled.jsonl", "sft.jsonl", "dpo.jsonl", "stats-report.json", "run-manifest.json"):
        assert (out / name).exists(), name
    assert read_manifest(out)["network"]["requests_sent"] > 0


def test_cmd_eval_and_judge(tmp_path) -> None:
    from conftest import MockEndpoint
    from test_eval_harness import TEN_ITEMS, ten_item_endpoint

    bench = tmp_path / "bench.jsonl"
    bench.write_text("".join(json.dumps({"id": i.id, "question": i.question, "answer": i.gold_answer}) + "\n" for i in TEN_ITEMS))
    responses = tmp_path / "responses.jsonl"
    responses.write_text('{"id": "a", "question": "q", "response": "r"}\n{"id": "b", "question": "q", "response": "r2"}\n')
    cfg = _cfg(tmp_path, eval={"input": str(bench)}, judge={"input": str(responses)})

    summary = cli.cmd_eval(cfg, transport=ten_item_endpoint().transport)
    assert summary["accuracy"] == 70.0 and summary["n_items"] == 10
    assert not (tmp_path / "out" / "eval-verdicts.partial.jsonl").exists()
    assert len(list(read_jsonl(tmp_path / "out" / "eval-verdicts.jsonl"))) == 10

    scores = iter(["Score: 4", "no score here"])
    judge_ep = MockEndpoint(lambda p: next(scores))
    judged = cli.cmd_judge(cfg.with_overrides(concurrency=1), transport=judge_ep.transport)
    assert judged == {"mean_score": 4.0, "n_scored": 1, "n_errors": 1}
    rows = list(read_jsonl(tmp_path / "out" / "judge-scores.jsonl"))
    assert rows[1]["error"].startswith("ScoreMissing")
