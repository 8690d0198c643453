"""Operator settings: documented keys, defaults < file < command-line overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

# key -> (default, help)
SETTINGS: dict[str, tuple[Any, str]] = {
    "llm.backend": ("scripted", "scripted | http"),
    "llm.base_url": ("", "OpenAI-compatible base URL (http backend); key from CLARA_LLM_API_KEY"),
    "llm.model": ("gpt-4", "model name sent to the backend"),
    "llm.temperature": (0.0, "sampling temperature"),
    "llm.max_output_tokens": (1024, "completion token cap"),
    "llm.timeout": (60.0, "HTTP timeout in seconds"),
    "llm.retries": (2, "transport retries before BackendUnavailable"),
    "llm.script_path": ("", "JSON object fingerprint -> response (scripted backend)"),
    "llm.strict": (True, "scripted backend: unknown prompt is an error"),
    "embedder.kind": ("hashing", "hashing | http"),
    "embedder.dimension": (256, "embedding dimension"),
    "embedder.url": ("", "encoder service URL (http embedder)"),
    "embedder.timeout": (30.0, "HTTP timeout in seconds"),
    "search.kind": ("none", "none | scripted | tavily"),
    "search.endpoint": ("https://api.tavily.com/search", "Tavily-compatible endpoint; key from CLARA_SEARCH_API_KEY"),
    "search.script_path": ("", "JSON object query-substring -> results (scripted search)"),
    "search.timeout": (20.0, "HTTP timeout in seconds"),
    "paths.index": ("", "vector index file written by ingest-corpus"),
    "paths.output_dir": ("clara-out", "where run/report write their files"),
    "jargon_dictionary_path": ("", "JSON Lines jargon dictionary; empty = bundled seed glossary"),
    "pipeline.max_iterations": (5, "critique loop cap per round"),
    "pipeline.top_k": (5, "snippets / web results per iteration"),
    "pipeline.tau_translation": (0.7, "retrieve when translation certainty is below this"),
    "pipeline.tau_medical": (0.7, "retrieve when medical certainty is below this"),
    "pipeline.max_rewrites": (1, "question rewrites per run"),
    "pipeline.max_retries": (2, "re-asks after an unparseable reply"),
    "pipeline.web_query_source": ("translated", "translated | original"),
    "harness.runs": (8, "repeated runs averaged per method"),
    "harness.parallelism": (1, "concurrent pipeline runs"),
    "ingest.snippet_length": (200, "whitespace tokens per snippet"),
    "ingest.overlap": (0, "tokens shared by consecutive snippets"),
}


def _flatten(obj: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in obj.items():
        full = f"{prefix}{key}"
        if isinstance(value, Mapping) and full not in SETTINGS:
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _coerce(key: str, value: Any) -> Any:
    default = SETTINGS[key][0]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    return str(value)


def _check_keys(keys: Iterable[str]) -> None:
    unknown = sorted(k for k in keys if k not in SETTINGS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(SETTINGS)}")


def load_settings(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    """Resolve settings. ``path`` is a JSON object, flat (``"llm.model"``) or nested."""
    settings = {k: v[0] for k, v in SETTINGS.items()}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        flat = _flatten(data)
        _check_keys(flat)
        settings.update({k: _coerce(k, v) for k, v in flat.items()})
    parsed = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parsed[key.strip()] = value
    _check_keys(parsed)
    settings.update({k: _coerce(k, v) for k, v in parsed.items()})
    return settings


def describe_settings() -> str:
    width = max(len(k) for k in SETTINGS)
    return "\n".join(f"  {k.ljust(width)}  default={v[0]!r}  {v[1]}" for k, v in SETTINGS.items())
