"""Run configuration: one YAML/JSON file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from cotprune.answer_matching import ExtractionMode
from cotprune.dataset_builder import FieldMap
from cotprune.metrics import CounterMode, TokenCounter
from cotprune.oracle_client import EndpointConfig, OraclePromptTemplate
from cotprune.prune_search import SearchConfig
from cotprune.segmentation import SegmentationConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    input: Path | None = None
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    extraction: ExtractionMode = ExtractionMode.AUTO
    instruction_prefix: str = ""
    exclude_failed: bool = False


@dataclass(frozen=True)
class JudgeSettings:
    input: Path | None = None
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    template: Path | None = None
    question_field: str = "question"
    response_field: str = "response"


@dataclass(frozen=True)
class RunConfig:
    out_dir: Path
    input: Path | None = None
    fields: FieldMap = FieldMap()
    segmentation: SegmentationConfig = SegmentationConfig()
    search: SearchConfig = SearchConfig()
    counter_mode: CounterMode = CounterMode.WHITESPACE
    counter_command: str | None = None
    oracle: EndpointConfig = field(default_factory=EndpointConfig)
    oracle_template: Path | None = None
    cache_path: Path | None = None
    concurrency: int = 8
    seed: int = 0
    eval: EvalSettings = field(default_factory=EvalSettings)
    judge: JudgeSettings = field(default_factory=JudgeSettings)

    @property
    def resolved_cache_path(self) -> Path:
        return self.cache_path or self.out_dir / "oracle-cache.jsonl"

    def token_counter(self) -> TokenCounter:
        return TokenCounter(self.counter_mode, command=self.counter_command)

    def prompt_template(self) -> OraclePromptTemplate:
        if self.oracle_template is None:
            return OraclePromptTemplate.default()
        return OraclePromptTemplate.from_file(self.oracle_template)

    def snapshot(self) -> dict[str, Any]:
        """Plain-data view of the config, as recorded in the run manifest."""

        def opt(p: Path | None) -> str | None:
            return None if p is None else str(p)

        return {
            "input": opt(self.input),
            "fields": self.fields.to_dict(),
            "out_dir": str(self.out_dir),
            "segmentation": self.segmentation.to_dict(),
            "search": self.search.to_dict(),
            "token_counter": {"mode": self.counter_mode.value, "command": self.counter_command},
            "oracle": self.oracle.to_dict(),
            "oracle_template": opt(self.oracle_template),
            "cache_path": opt(self.cache_path),
            "concurrency": self.concurrency,
            "seed": self.seed,
            "eval": {
                "input": opt(self.eval.input),
                "endpoint": self.eval.endpoint.to_dict(),
                "extraction": self.eval.extraction.value,
                "instruction_prefix": self.eval.instruction_prefix,
                "exclude_failed": self.eval.exclude_failed,
            },
            "judge": {
                "input": opt(self.judge.input),
                "endpoint": self.judge.endpoint.to_dict(),
                "template": opt(self.judge.template),
                "question_field": self.judge.question_field,
                "response_field": self.judge.response_field,
            },
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, **changes: Any) -> RunConfig:
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


_TOP_KEYS = {
    "input", "fields", "out_dir", "segmentation", "search", "token_counter", "oracle",
    "oracle_template", "cache_path", "concurrency", "seed", "eval", "judge",
}


def _path(value: Any, base: Path) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _section(data: Mapping[str, Any], key: str) -> dict[str, Any]:
    value = data.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"'{key}' must be a mapping")
    return dict(value)


def config_from_dict(data: Mapping[str, Any], base_dir: str | Path = ".") -> RunConfig:
    """Build a RunConfig; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        counter = _section(data, "token_counter")
        ev = _section(data, "eval")
        jd = _section(data, "judge")
        return RunConfig(
            out_dir=_path(data.get("out_dir"), base) or base / "run",
            input=_path(data.get("input"), base),
            fields=FieldMap(**_section(data, "fields")),
            segmentation=SegmentationConfig(**_section(data, "segmentation")),
            search=SearchConfig(**_section(data, "search")),
            counter_mode=CounterMode(counter.get("mode", CounterMode.WHITESPACE.value)),
            counter_command=counter.get("command"),
            oracle=EndpointConfig.from_dict(_section(data, "oracle")),
            oracle_template=_path(data.get("oracle_template"), base),
            cache_path=_path(data.get("cache_path"), base),
            concurrency=int(data.get("concurrency", 8)),
            seed=int(data.get("seed", 0)),
            eval=EvalSettings(
                input=_path(ev.get("input"), base),
                endpoint=EndpointConfig.from_dict(ev.get("endpoint") or {}),
                extraction=ExtractionMode(ev.get("extraction", ExtractionMode.AUTO.value)),
                instruction_prefix=ev.get("instruction_prefix", ""),
                exclude_failed=bool(ev.get("exclude_failed", False)),
            ),
            judge=JudgeSettings(
                input=_path(jd.get("input"), base),
                endpoint=EndpointConfig.from_dict(jd.get("endpoint") or {}),
                template=_path(jd.get("template"), base),
                question_field=jd.get("question_field", "question"),
                response_field=jd.get("response_field", "response"),
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, path.parent.resolve())


def check_paths(cfg: RunConfig, *names: str) -> None:
    """Fail early when a referenced input file is missing."""
    lookup = {
        "input": cfg.input,
        "oracle_template": cfg.oracle_template,
        "eval.input": cfg.eval.input,
        "judge.input": cfg.judge.input,
        "judge.template": cfg.judge.template,
    }
    for name in names:
        p = lookup[name]
        if p is not None and not p.exists():
            raise ConfigError(f"{name}: {p} does not exist")
    if cfg.concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    if cfg.counter_mode is CounterMode.EXTERNAL and not cfg.counter_command:
        raise ConfigError("token_counter.mode=external needs token_counter.command")
