"""Command line entry point: ``kgenrich enrich | metrics | review | cost | fixture``.

Exit codes: 0 success, 1 usage or input error, 2 run stopped early by a backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

from .config import ABLATIONS, ConfigError, load_config
from .gateway import BackendError
from .graph import KnowledgeGraph
from .metrics import Judge, compute_metrics, load_qa
from .agents.entities import EntityDictionary
from .pipeline import (
    CorpusError,
    RunReport,
    export_review_queue,
    import_review_decisions,
    load_corpus,
    make_gateway,
    run,
)

logger = logging.getLogger("kgenrich")

FIXTURE_FILES = ("corpus.jsonl", "seed_kg.jsonl", "dictionary.jsonl", "rules.jsonl", "judge_rules.jsonl",
                 "qa.jsonl", "config.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def cmd_enrich(args) -> int:
    corpus_path = _existing(args.corpus, "corpus")
    kg_in = _existing(args.kg_in, "input graph")
    cfg_path = _existing(args.config, "config")
    dict_path = _existing(args.dictionary, "dictionary")
    overrides = {"seed": args.seed, "worker_count": args.workers, "backend": args.backend}
    cfg = load_config(cfg_path, **overrides)
    if args.rules:
        cfg.rules = str(_existing(args.rules, "rules file"))
    elif cfg.rules and cfg_path is not None and not Path(cfg.rules).is_absolute():
        cfg.rules = str(cfg_path.parent / cfg.rules)
    cfg = cfg.with_ablation(args.ablation)
    if cfg.backend == "scripted" and not cfg.rules:
        raise UsageError("scripted backend needs --rules (or rules = ... in the config)")
    if cfg.backend == "scripted":
        _existing(cfg.rules, "rules file")

    corpus = load_corpus(corpus_path)
    graph = KnowledgeGraph.load(kg_in) if kg_in else KnowledgeGraph()
    if cfg.incompatible:
        for a, b in cfg.incompatible:
            graph.incompatibility.add(a, b)
    dictionary = EntityDictionary.load(dict_path) if dict_path else None
    gateway = make_gateway(cfg)
    enriched, report = run(corpus, graph, cfg, gateway, dictionary, index_cache=args.index_cache)

    enriched.save(args.kg_out)
    report_path = Path(args.report) if args.report else Path(args.kg_out).with_suffix(".report.json")
    report.save(report_path)
    review_path = Path(args.review_out) if args.review_out else Path(args.kg_out).with_suffix(".review.jsonl")
    export_review_queue(report, review_path)
    c = report.counts
    print(f"{len(report.documents)} documents, {c['candidates']} candidates: {c['integrated']} integrated, "
          f"{c['discarded']} discarded, {c['review']} for review, {c['dropped_by_error']} dropped")
    if not report.complete:
        print(f"run incomplete: {report.error}", file=sys.stderr)
        return 2
    return 0


def cmd_metrics(args) -> int:
    before = KnowledgeGraph.load(_existing(args.kg_before, "before graph"))
    after = KnowledgeGraph.load(_existing(args.kg_after, "after graph"))
    report = json.loads(_existing(args.report, "report").read_text(encoding="utf-8")) if args.report else None
    qa = load_qa(_existing(args.qa, "QA set")) if args.qa else None
    judge = None
    if args.judge != "off":
        cfg = load_config(_existing(args.config, "config"), backend=args.judge)
        if args.judge == "scripted":
            if not args.judge_rules:
                raise UsageError("--judge scripted needs --judge-rules")
            cfg.rules = str(_existing(args.judge_rules, "judge rules"))
        judge = Judge(make_gateway(cfg))
    result = compute_metrics(before, after, report, qa, judge)
    text = result.dumps()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_review(args) -> int:
    if args.action == "export":
        report = RunReport.load(_existing(args.report, "report"))
        n = export_review_queue(report, args.out)
        print(f"wrote {n} review lines to {args.out}")
        return 0
    graph = KnowledgeGraph.load(_existing(args.kg, "graph"))
    summary = import_review_decisions(graph, _existing(args.decisions, "decisions file"))
    graph.save(args.kg_out or args.kg)
    for w in summary.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"applied {summary.applied}, rejected {summary.rejected}, undecided {summary.undecided}, "
          f"skipped {summary.skipped}")
    return 1 if summary.skipped and summary.applied == 0 else 0


def format_cost(cost: dict, latency: dict | None = None) -> str:
    latency = latency or {}
    lat = latency.get("by_tag", {})
    rows = [("tag", "calls", "attempts", "prompt", "completion", "latency_s")]
    for tag, t in cost.get("by_tag", {}).items():
        rows.append((tag, t["calls"], t["attempts"], t["prompt_tokens"], t["completion_tokens"],
                     f"{lat.get(tag, 0.0):.3f}"))
    tot = cost.get("total", {})
    rows.append(("TOTAL", tot.get("calls", 0), tot.get("attempts", 0), tot.get("prompt_tokens", 0),
                 tot.get("completion_tokens", 0), f"{latency.get('total', 0.0):.3f}"))
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(v).ljust(w) if i == 0 else str(v).rjust(w)
                               for i, (v, w) in enumerate(zip(r, widths))) for r in rows) + "\n"


def cmd_cost(args) -> int:
    report = RunReport.load(_existing(args.report, "report"))
    if args.json:
        sys.stdout.write(json.dumps(report.cost, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(format_cost(report.cost, report.runtime.get("latency")))
    return 0


def cmd_fixture(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = resources.files("kgenrich").joinpath("data")
    for name in FIXTURE_FILES:
        with resources.as_file(data.joinpath(name)) as src:
            shutil.copyfile(src, out / name)
    print(f"wrote {len(FIXTURE_FILES)} fixture files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgenrich", description="Enrich a biomedical knowledge graph from literature.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("enrich", help="run the extraction pipeline over a corpus")
    e.add_argument("--corpus", required=True, help="JSONL of {doc_id, text, metadata}")
    e.add_argument("--kg-in", help="starting graph (JSONL); empty graph when omitted")
    e.add_argument("--kg-out", required=True)
    e.add_argument("--config")
    e.add_argument("--report")
    e.add_argument("--review-out")
    e.add_argument("--dictionary", help="ontology terms (JSONL of {id, names, type})")
    e.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    e.add_argument("--backend", choices=("live", "scripted"))
    e.add_argument("--rules")
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--index-cache", help="file for caching entity embeddings between runs")
    e.set_defaults(func=cmd_enrich)

    m = sub.add_parser("metrics", help="compute quality measures for a before/after graph pair")
    m.add_argument("--kg-before", required=True)
    m.add_argument("--kg-after", required=True)
    m.add_argument("--report")
    m.add_argument("--qa")
    m.add_argument("--judge", choices=("live", "scripted", "off"), default="off")
    m.add_argument("--judge-rules")
    m.add_argument("--config")
    m.add_argument("--out")
    m.set_defaults(func=cmd_metrics)

    r = sub.add_parser("review", help="export or import the manual review queue")
    rsub = r.add_subparsers(dest="action", required=True, parser_class=_Parser)
    rx = rsub.add_parser("export")
    rx.add_argument("--report", required=True)
    rx.add_argument("--out", required=True)
    ri = rsub.add_parser("import")
    ri.add_argument("--kg", required=True)
    ri.add_argument("--decisions", required=True)
    ri.add_argument("--kg-out", help="defaults to overwriting --kg")
    r.set_defaults(func=cmd_review)

    c = sub.add_parser("cost", help="print token and call totals per agent")
    c.add_argument("--report", required=True)
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_cost)

    f = sub.add_parser("fixture", help="copy the bundled demo corpus, graph and rules")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fixture)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, CorpusError) as exc:
        print(f"kgenrich: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"kgenrich: error: {exc}", file=sys.stderr)
        return 1
    except BackendError as exc:
        print(f"kgenrich: backend failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
