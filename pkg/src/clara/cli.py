"""Command-line entry point: ingest-corpus, validate-bench, run, report.

Exit codes: 0 success, 1 IO/parse error, 2 validation error, 3 port failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import harness
from .config import describe_settings, load_settings
from .core_model import load_benchmark_jsonl, validate_benchmark
from .embedding_index import HashingEmbedder, HttpEmbedder, VectorIndex, build_index, load_corpus_jsonl
from .errors import (
    BackendUnavailable,
    ClaraError,
    ConfigError,
    DuplicateItem,
    EmbedderUnavailable,
    EmptyCorpus,
    IndexFormatError,
    IndexRequired,
    IoFailure,
    MalformedItem,
    PairingViolation,
    ScriptMiss,
    SearchUnavailable,
    VersionMismatch,
)
from .jargon import JargonDictionary
from .llm_gateway import CompletionParams, HttpChatBackend, LLMGateway, ScriptedBackend
from .pipeline import Ports
from .websearch import ScriptedSearch, TavilySearch

logger = logging.getLogger("clara")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_PORT = 0, 1, 2, 3


def make_embedder(settings: dict[str, Any]):
    if settings["embedder.kind"] == "hashing":
        return HashingEmbedder(settings["embedder.dimension"])
    if settings["embedder.kind"] == "http":
        if not settings["embedder.url"]:
            raise ConfigError("embedder.kind=http needs embedder.url")
        return HttpEmbedder(settings["embedder.url"], settings["embedder.dimension"], settings["embedder.timeout"])
    raise ConfigError(f"unknown embedder.kind {settings['embedder.kind']!r}")


def make_ports(settings: dict[str, Any], need_index: bool = False) -> Ports:
    kind = settings["llm.backend"]
    if kind == "scripted":
        if not settings["llm.script_path"]:
            raise ConfigError("llm.backend=scripted needs llm.script_path")
        backend = ScriptedBackend.from_file(settings["llm.script_path"], strict=settings["llm.strict"])
    elif kind == "http":
        if not settings["llm.base_url"]:
            raise ConfigError("llm.backend=http needs llm.base_url")
        backend = HttpChatBackend(settings["llm.base_url"], timeout=settings["llm.timeout"], retries=settings["llm.retries"])
    else:
        raise ConfigError(f"unknown llm.backend {kind!r}")
    params = CompletionParams(settings["llm.model"], settings["llm.temperature"], settings["llm.max_output_tokens"])

    search = None
    if settings["search.kind"] == "scripted":
        if not settings["search.script_path"]:
            raise ConfigError("search.kind=scripted needs search.script_path")
        search = ScriptedSearch.from_file(settings["search.script_path"])
    elif settings["search.kind"] == "tavily":
        search = TavilySearch(settings["search.endpoint"], timeout=settings["search.timeout"])
    elif settings["search.kind"] != "none":
        raise ConfigError(f"unknown search.kind {settings['search.kind']!r}")

    index = None
    if settings["paths.index"]:
        index = VectorIndex.load(settings["paths.index"])
    elif need_index:
        raise IndexRequired("this method retrieves from a vector index: run ingest-corpus and set paths.index")

    dict_path = settings["jargon_dictionary_path"]
    dictionary = JargonDictionary.from_jsonl(dict_path) if dict_path else JargonDictionary.seed()
    return Ports(
        llm=LLMGateway(backend, params),
        embedder=make_embedder(settings),
        index=index,
        dictionary=dictionary,
        search=search,
        params=params,
    )


def pipeline_overrides(settings: dict[str, Any]) -> dict[str, Any]:
    return {
        "max_iterations": settings["pipeline.max_iterations"],
        "top_k": settings["pipeline.top_k"],
        "tau_translation": settings["pipeline.tau_translation"],
        "tau_medical": settings["pipeline.tau_medical"],
        "max_rewrites": settings["pipeline.max_rewrites"],
        "max_retries": settings["pipeline.max_retries"],
    }


# -- subcommands -----------------------------------------------------------------

def cmd_ingest(args, settings) -> int:
    length = args.snippet_length if args.snippet_length is not None else settings["ingest.snippet_length"]
    overlap = args.overlap if args.overlap is not None else settings["ingest.overlap"]
    docs = load_corpus_jsonl(args.corpus)
    if not docs:
        raise EmptyCorpus(f"{args.corpus}: corpus has no documents")
    index = build_index(docs, make_embedder(settings), length, overlap)
    index.save(args.out)
    print(f"docs={len(docs)} snippets={len(index)} dimension={index.dimension}")
    return EXIT_OK


def cmd_validate(args, settings) -> int:
    bench = validate_benchmark(load_benchmark_jsonl(args.bench))
    print(bench.summary())
    return EXIT_OK


def cmd_run(args, settings) -> int:
    runs = args.runs if args.runs is not None else settings["harness.runs"]
    spec = harness.MethodSpec.named(args.method, runs, args.level, **pipeline_overrides(settings))
    if args.method == "web_toolcall" and settings["pipeline.web_query_source"] != "original":
        logger.info("web_toolcall always searches with the original-language question")
    elif args.method != "web_toolcall":
        cfg = spec.pipeline_config
        spec = harness.MethodSpec(
            spec.name,
            type(cfg)(**{**cfg.to_json(), "web_query_source": settings["pipeline.web_query_source"]}),
            spec.runs,
        )
    print(f"method={spec.label} config={spec.pipeline_config.label} runs={spec.runs}")
    bench = validate_benchmark(load_benchmark_jsonl(args.bench))
    ports = make_ports(settings, need_index=spec.uses_index)
    method_run = harness.run_method(bench, spec, ports, settings["harness.parallelism"])
    out = Path(args.out or settings["paths.output_dir"])
    harness.write_run_artifacts([method_run], bench, out)
    report = harness.report_from_runs([method_run], bench)
    for path in harness.emit_report(report, args.formats, out):
        print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args, settings) -> int:
    try:
        doc = json.loads(Path(args.outcomes).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise VersionMismatch(f"{args.outcomes}: not a stored outcomes document ({exc})") from None
    report = harness.report_from_outcomes_document(doc)
    out = Path(args.out or Path(args.outcomes).parent)
    for path in harness.emit_report(report, args.formats, out):
        print(f"wrote {path}")
    return EXIT_OK


def _formats(text: str) -> list[str]:
    items = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in items if f not in harness.REPORT_FORMATS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown formats {bad}")
    return items


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (set in --config JSON or with --set key=value):\n" + describe_settings()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="clara", description="Multilingual ophthalmology QA: reflective pipeline and benchmark harness.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-corpus", parents=[common], help="chunk, embed and index a corpus",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("corpus", help="JSON Lines corpus {doc_id, source, title, text}")
    p.add_argument("out", help="index file to write (a .json sidecar is written next to it)")
    p.add_argument("--snippet-length", type=int)
    p.add_argument("--overlap", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("validate-bench", parents=[common], help="check language pairing of a benchmark",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("bench")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", parents=[common], help="run one method over a benchmark",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("bench")
    p.add_argument("--method", required=True, choices=harness.METHOD_NAMES)
    p.add_argument("--level", type=int, choices=range(0, 6), help="ablation ladder level (method=ablation)")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", help="output directory (default: paths.output_dir)")
    p.add_argument("--formats", type=_formats, default=["json", "csv", "markdown"])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", parents=[common], help="re-render reports from stored outcomes",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("outcomes", help="outcomes.json written by 'run'")
    p.add_argument("--out")
    p.add_argument("--formats", type=_formats, default=["json", "csv", "markdown"])
    p.set_defaults(func=cmd_report)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (BackendUnavailable, ScriptMiss, IndexRequired, EmbedderUnavailable, SearchUnavailable)):
        return EXIT_PORT
    if isinstance(exc, (PairingViolation, DuplicateItem, MalformedItem, EmptyCorpus, ConfigError)):
        return EXIT_VALIDATION
    if isinstance(exc, (OSError, UnicodeDecodeError, ValueError, IndexFormatError, VersionMismatch, IoFailure)):
        return EXIT_IO
    return EXIT_IO


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = load_settings(args.config, args.overrides)
        return args.func(args, settings)
    except PairingViolation as exc:
        for q, lang in exc.missing:
            print(f"missing: ({q}, {lang})", file=sys.stderr)
        for q, what in exc.mismatches:
            print(f"mismatch: {q} {what}", file=sys.stderr)
        return EXIT_VALIDATION
    except IndexRequired as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PORT
    except (ClaraError, OSError, UnicodeDecodeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
