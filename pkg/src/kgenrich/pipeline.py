"""Central controller: parallel per-document extraction feeding one serialized integrator.

Workers run ingest through relation extraction against a frozen snapshot of the
starting graph, so their output does not depend on scheduling. The integrator
then commits documents one at a time in ``doc_id`` order: novel-entity minting,
schema alignment, conflict checks, evaluation and graph writes. Each document
commits atomically; a backend failure rolls back the document in flight and
stops the run with a report marked incomplete.
"""

from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .agents.conflict import resolve_conflict
from .agents.entities import (
    PENDING_PREFIX,
    EntityDictionary,
    NormalizedMention,
    NovelEntityRegistry,
    extract_entities,
)
from .agents.evaluator import SENTINEL, Evaluation, EvaluationError, evaluate, gather_signals
from .agents.ingest import ingest
from .agents.reader import score_segments
from .agents.relations import CandidateTriplet, extract_relations
from .agents.schema import align_schema
from .agents.summarizer import Summary, passthrough, summarize
from .config import PipelineConfig
from .embedding import EmbeddingProvider, EntityIndex, HashingEmbedder, load_index, save_index
from .gateway import BackendError, Gateway, OpenAICompatibleBackend, ScriptedBackend
from .graph import CanonicalEntity, GraphError, KnowledgeGraph, Triplet
from .protocol import AuditLog, PromptTemplate, load_catalog

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


def load_corpus(path: str | Path) -> list[dict]:
    docs, seen = [], set()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{n}: not JSON: {exc}") from exc
        if not isinstance(rec, dict) or "doc_id" not in rec or "text" not in rec:
            raise CorpusError(f"{path}:{n}: records need doc_id and text")
        if rec["doc_id"] in seen:
            raise CorpusError(f"{path}:{n}: duplicate doc_id {rec['doc_id']!r}")
        seen.add(rec["doc_id"])
        docs.append(rec)
    return docs


def make_gateway(config: PipelineConfig, rules: str | Path | None = None, sleep=time.sleep) -> Gateway:
    if config.backend == "scripted":
        path = rules or config.rules
        if not path:
            raise ValueError("the scripted backend needs a rules file")
        backend = ScriptedBackend.from_file(path)
    else:
        backend = OpenAICompatibleBackend(config.base_url, config.model, api_key_env=config.api_key_env)
    return Gateway(backend, retries=config.retries, max_in_flight=config.max_in_flight,
                   sleep=sleep, models=config.models)


# -- worker side --------------------------------------------------------------


@dataclass
class DocumentResult:
    doc_id: str
    status: str = "ok"
    error: str = ""
    segments: int = 0
    segments_kept: int = 0
    summaries: list[Summary] = field(default_factory=list)
    mentions: list[NormalizedMention] = field(default_factory=list)
    candidates: list[CandidateTriplet] = field(default_factory=list)
    audit: AuditLog = field(default_factory=AuditLog)
    timings: dict[str, float] = field(default_factory=lambda: defaultdict(float))


@dataclass
class RunContext:
    config: PipelineConfig
    gateway: Gateway
    catalog: dict[str, PromptTemplate]
    dictionary: EntityDictionary
    provider: EmbeddingProvider
    start_graph: KnowledgeGraph
    index: EntityIndex


@contextmanager
def _timed(timings: dict[str, float], stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] += time.perf_counter() - start


def process_document(raw: dict, ctx: RunContext) -> DocumentResult:
    """Ingest through relation extraction for one document. Pure given the snapshot."""
    cfg = ctx.config
    doc_id = str(raw["doc_id"])
    res = DocumentResult(doc_id, audit=AuditLog(doc_id))
    t = res.timings
    with _timed(t, "ingest"):
        doc = ingest(raw, ctx.gateway, ctx.catalog, res.audit, cfg.use_llm_ingest)
    if doc.error:
        res.status, res.error = "error", doc.error_reason
        return res
    with _timed(t, "read"):
        scored = score_segments(doc, ctx.start_graph, ctx.gateway, ctx.catalog, res.audit)
    res.segments = len(scored)
    kept = [s for s in scored if s is not None and s.relevance >= cfg.delta]
    res.segments_kept = len(kept)
    vocab = sorted(ctx.start_graph.relations)
    for seg in kept:
        with _timed(t, "summarize"):
            if cfg.use_summarizer:
                summary = summarize(seg, ctx.gateway, cfg.skip_threshold, ctx.catalog, res.audit,
                                    cfg.max_summary_words)
            else:
                summary = passthrough(seg)
        res.summaries.append(summary)
        if summary.omitted:
            continue
        with _timed(t, "extract_entities"):
            mentions = extract_entities(summary, ctx.dictionary, ctx.index, ctx.start_graph,
                                        ctx.gateway, cfg.rho, ctx.provider, ctx.catalog,
                                        res.audit, cfg.strict_filter)
        res.mentions.extend(mentions)
        with _timed(t, "extract_relations"):
            cands = extract_relations(summary, mentions, ctx.gateway, cfg.theta_for, vocab,
                                      ctx.catalog, res.audit)
        res.candidates.extend(cands)
    return res


# -- report -------------------------------------------------------------------

COUNT_KEYS = (
    "candidates", "integrated", "inserted", "merged", "discarded", "discarded_by_cra",
    "discarded_by_evaluator", "review", "dropped_by_error", "removed_by_cra", "conflicts_checked",
)


@dataclass
class RunReport:
    config: dict
    complete: bool = True
    error: str | None = None
    documents: list[dict] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in COUNT_KEYS})
    triplets: list[dict] = field(default_factory=list)
    review: list[dict] = field(default_factory=list)
    schema_candidates: list[dict] = field(default_factory=list)
    new_entities: list[str] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)
    cost: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def reconciles(self) -> bool:
        c = self.counts
        return c["candidates"] == c["integrated"] + c["discarded"] + c["review"] + c["dropped_by_error"]

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = {
            "complete": self.complete,
            "error": self.error,
            "config": self.config,
            "counts": dict(self.counts),
            "documents": self.documents,
            "triplets": self.triplets,
            "review": self.review,
            "schema_candidates": self.schema_candidates,
            "new_entities": self.new_entities,
            "audit": self.audit,
            "cost": self.cost,
        }
        if include_runtime:
            d["runtime"] = self.runtime
        return d

    def dumps(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            config=d.get("config", {}), complete=d.get("complete", True), error=d.get("error"),
            documents=d.get("documents", []), counts={**{k: 0 for k in COUNT_KEYS}, **d.get("counts", {})},
            triplets=d.get("triplets", []), review=d.get("review", []),
            schema_candidates=d.get("schema_candidates", []), new_entities=d.get("new_entities", []),
            audit=d.get("audit", []), cost=d.get("cost", {}), runtime=d.get("runtime", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _entity_record(e: CanonicalEntity) -> dict:
    return {"id": e.id, "surface_forms": list(e.surface_forms), "entity_type": e.entity_type,
            "provenance": e.provenance}


def _triplet_ref(t: Triplet) -> dict:
    return {"head": t.head, "relation": t.relation, "tail": t.tail, "confidence": t.confidence}


# -- integrator ---------------------------------------------------------------


class Integrator:
    """Single writer for the working graph and the novel-entity registry."""

    def __init__(self, ctx: RunContext, graph: KnowledgeGraph, report: RunReport):
        self.ctx = ctx
        self.cfg = ctx.config
        self.graph = graph
        self.report = report
        self.registry = NovelEntityRegistry(ctx.provider, self.cfg.rho, graph.entities)
        self.relation_map: dict[str, str] = {}
        self.timings: dict[str, float] = defaultdict(float)

    def _resolve_entities(self, res: DocumentResult) -> dict[str, CanonicalEntity]:
        resolved: dict[str, CanonicalEntity] = {}
        for m in res.mentions:
            if not m.novel:
                resolved.setdefault(m.entity_id, self.graph.entities.get(m.entity_id, m.entity))
                continue
            pending = m.entity_id
            onto = None if pending.startswith(PENDING_PREFIX) else pending
            fresh = CanonicalEntity(pending, list(m.entity.surface_forms), m.entity.entity_type,
                                    m.entity.provenance)
            final = self.registry.resolve(fresh, onto)
            resolved.setdefault(pending, final)
        return resolved

    def _align(self, res: DocumentResult, resolved: dict[str, CanonicalEntity], audit: AuditLog) -> None:
        in_dict = {m.entity_id for m in res.mentions if m.novel and m.in_dictionary}
        unknown_entities = []
        for pending, ent in resolved.items():
            if ent.id in self.registry.entities and pending not in in_dict \
                    and ent.id not in self.registry.aligned and ent not in unknown_entities:
                unknown_entities.append(ent)
        unknown_relations = []
        for c in res.candidates:
            r = c.relation
            if r in self.graph.relations or r in self.relation_map or r in self.graph.candidate_relations:
                continue
            if r not in unknown_relations:
                unknown_relations.append(r)
        if not unknown_entities and not unknown_relations:
            return
        before_types = set(self.graph.type_set)
        result = align_schema(unknown_entities, unknown_relations, self.graph, self.ctx.gateway,
                              self.ctx.catalog, audit)
        self.registry.aligned.update(e.id for e in unknown_entities)
        self.relation_map.update(result.relation_map())
        for rel in unknown_relations:
            self.relation_map.setdefault(rel, rel)
        for tname in self.graph.type_set:
            if tname not in before_types:
                self._schema_lines.append({"kind": "schema_candidate", "category": "type", "name": tname,
                                           "closest_match": None, "source_doc": res.doc_id, "decision": None})
        for m in result.relations:
            if m.status == "new":
                self._schema_lines.append({"kind": "schema_candidate", "category": "relation",
                                           "name": m.relation, "closest_match": m.closest_match,
                                           "source_doc": res.doc_id, "decision": None})

    def _schema_mapped(self, t: Triplet, *ends: CanonicalEntity) -> bool:
        """Registered relation and both endpoints carry a real type."""
        return t.relation in self.graph.relations and all(e.entity_type != "Other" for e in ends)

    def commit(self, res: DocumentResult) -> None:
        doc = {"doc_id": res.doc_id, "status": res.status, "segments": res.segments,
               "segments_kept": res.segments_kept, "summaries": len(res.summaries),
               "omitted": sum(1 for s in res.summaries if s.omitted), "mentions": len(res.mentions),
               "candidates": len(res.candidates)}
        if res.error:
            doc["error"] = res.error
        if res.status != "ok" or not res.candidates:
            self.report.documents.append(doc)
            self.report.audit.extend(res.audit.to_list())
            return

        graph_state = self.graph.copy()
        registry_state = self.registry.snapshot()
        relation_map_state = dict(self.relation_map)
        audit = AuditLog(res.doc_id)
        self._schema_lines: list[dict] = []
        counts = {k: 0 for k in COUNT_KEYS}
        triplets, review, new_entities = [], [], []
        try:
            with _timed(self.timings, "normalize"):
                resolved = self._resolve_entities(res)
            with _timed(self.timings, "align_schema"):
                self._align(res, resolved, audit)
            for cand in res.candidates:
                counts["candidates"] += 1
                outcome = self._commit_candidate(cand, resolved, audit, counts, review, new_entities)
                triplets.append(outcome)
        except BackendError:
            self.graph.__dict__.update(graph_state.__dict__)
            self.registry.restore(registry_state)
            self.relation_map = relation_map_state
            raise
        for k, v in counts.items():
            self.report.counts[k] += v
        doc.update({k: counts[k] for k in ("integrated", "discarded", "review", "dropped_by_error")})
        self.report.documents.append(doc)
        self.report.triplets.extend(triplets)
        self.report.review.extend(review)
        self.report.schema_candidates.extend(self._schema_lines)
        self.report.new_entities.extend(new_entities)
        self.report.audit.extend(res.audit.to_list())
        self.report.audit.extend(audit.to_list())

    def _commit_candidate(self, cand: CandidateTriplet, resolved: dict[str, CanonicalEntity],
                          audit: AuditLog, counts: dict, review: list, new_entities: list) -> dict:
        cfg = self.cfg
        head = resolved.get(cand.head) or self.graph.entities.get(cand.head)
        tail = resolved.get(cand.tail) or self.graph.entities.get(cand.tail)
        record = {"doc_id": cand.doc_id, "seg_index": cand.seg_index, "order": cand.order,
                  "extracted": [cand.head, cand.relation, cand.tail],
                  "extraction_confidence": cand.confidence}
        if head is None or tail is None:
            counts["dropped_by_error"] += 1
            audit.add("dropped", "integrator", f"unresolved endpoint in {cand.key}")
            record["outcome"] = "dropped_by_error"
            return record
        relation = self.relation_map.get(cand.relation, cand.relation)
        t = Triplet(head.id, relation, tail.id, cand.confidence, 0.0, cand.segment_relevance,
                    cand.doc_id)
        record.update({"head": t.head, "relation": t.relation, "tail": t.tail})

        decision = None
        if cfg.use_conflict_resolution:
            with _timed(self.timings, "resolve_conflicts"):
                conflicts = self.graph.find_conflicts(t)
                if conflicts:
                    counts["conflicts_checked"] += 1
                decision = resolve_conflict(t, conflicts, self.ctx.gateway, self.ctx.catalog, audit,
                                            cfg.escalation, cand.context)
            if decision.called:
                record["conflict"] = {"decision": decision.decision, "action": decision.action,
                                      "conflicts_with": [_triplet_ref(c) for c in decision.conflicts]}
            if decision.action == "discard":
                counts["discarded"] += 1
                counts["discarded_by_cra"] += 1
                counts["removed_by_cra"] += 1
                record["outcome"] = "discarded"
                record["reason"] = "conflict"
                return record
            if decision.action == "review":
                counts["review"] += 1
                counts["removed_by_cra"] += 1
                record["outcome"] = "review"
                review.append({
                    "kind": "triplet", "head": t.head, "relation": t.relation, "tail": t.tail,
                    "conflicts_with": [_triplet_ref(c) for c in decision.conflicts],
                    "conflict_decision": decision.decision, "rationale": decision.rationale,
                    "scores": {"confidence": t.confidence, "clarity": 0.5, "relevance": t.relevance},
                    "source_doc": t.source_doc,
                    "entities": [_entity_record(head), _entity_record(tail)],
                    "decision": None,
                })
                return record

        if cfg.use_evaluator:
            with _timed(self.timings, "evaluate"):
                try:
                    signals = gather_signals(
                        t.head, t.relation, t.tail, extraction_confidence=cand.confidence,
                        schema_mapped=self._schema_mapped(t, head, tail), segment_relevance=cand.segment_relevance,
                        context=cand.context, gateway=self.ctx.gateway, catalog=self.ctx.catalog,
                        audit=audit, conflict_status=decision.decision if decision else None)
                    ev: Evaluation = evaluate(signals, cfg.alpha, cfg.beta, cfg.gamma,
                                              cfg.integrate_threshold)
                except EvaluationError as exc:
                    audit.add("evaluation_error", "EA", f"{t.key}: {exc}")
                    counts["dropped_by_error"] += 1
                    record["outcome"] = "dropped_by_error"
                    return record
            record["evaluation"] = ev.to_dict()
            if not ev.integrated:
                counts["discarded"] += 1
                counts["discarded_by_evaluator"] += 1
                record["outcome"] = "discarded"
                record["reason"] = "evaluator"
                return record
            t.confidence, t.clarity, t.relevance = (round(x, 6) for x in
                                                    (ev.confidence, ev.clarity, ev.relevance))
        else:
            record["evaluation"] = SENTINEL.to_dict()
            t.clarity = 0.5

        with _timed(self.timings, "integrate"):
            try:
                for ent in (head, tail):
                    fresh = ent.id not in self.graph.entities
                    self.graph.upsert_entity(ent)
                    if fresh:
                        new_entities.append(ent.id)
                outcome = self.graph.integrate_triplet(t)
            except GraphError as exc:
                audit.add("integration_error", "integrator", f"{t.key}: {exc}")
                counts["dropped_by_error"] += 1
                record["outcome"] = "dropped_by_error"
                return record
        counts["integrated"] += 1
        counts["inserted" if outcome == "inserted" else "merged"] += 1
        record["outcome"] = "integrated"
        record["stored"] = {"confidence": t.confidence, "clarity": t.clarity, "relevance": t.relevance}
        return record


# -- driver -------------------------------------------------------------------


def _build_index(graph: KnowledgeGraph, provider: EmbeddingProvider,
                 cache: str | Path | None) -> EntityIndex:
    if cache is not None:
        cached = load_index(cache, provider.provider_id, provider.seed)
        if cached is not None and cached.ids == sorted(graph.entities):
            return cached
    index = EntityIndex.from_graph(graph, provider)
    if cache is not None:
        save_index(index, cache, provider.provider_id, provider.seed)
    return index


def run(corpus: Iterable[dict], graph: KnowledgeGraph, config: PipelineConfig, gateway: Gateway,
        dictionary: EntityDictionary | None = None, provider: EmbeddingProvider | None = None,
        catalog: dict[str, PromptTemplate] | None = None,
        index_cache: str | Path | None = None) -> tuple[KnowledgeGraph, RunReport]:
    """Enrich a copy of ``graph`` from ``corpus``; the input graph is left untouched."""
    config.validate()
    started = time.perf_counter()
    docs = sorted(corpus, key=lambda d: str(d["doc_id"]))
    provider = provider or HashingEmbedder(config.embedding_dim, config.seed, case_fold=config.case_fold)
    start = graph.copy()
    ctx = RunContext(config, gateway, catalog or load_catalog(), dictionary or EntityDictionary(),
                     provider, start, _build_index(start, provider, index_cache))
    working = graph.copy()
    report = RunReport(config.recorded())
    integrator = Integrator(ctx, working, report)
    worker_time: dict[str, float] = defaultdict(float)
    calls_before = len(gateway.calls)

    window = 2 * config.worker_count
    with ThreadPoolExecutor(max_workers=config.worker_count, thread_name_prefix="kg-worker") as pool:
        pending: list[Future] = []
        it = iter(docs)

        def fill():
            while len(pending) < window:
                raw = next(it, None)
                if raw is None:
                    return
                pending.append(pool.submit(process_document, raw, ctx))

        fill()
        while pending:
            fut = pending.pop(0)
            try:
                res = fut.result()
                for k, v in res.timings.items():
                    worker_time[k] += v
                integrator.commit(res)
            except BackendError as exc:
                report.complete = False
                report.error = f"{type(exc).__name__}: {exc}"
                logger.error("stopping run: %s", report.error)
                for f in pending:
                    f.cancel()
                pending.clear()
                break
            fill()

    ledger = _ledger(gateway, calls_before)
    report.cost = ledger["deterministic"]
    report.runtime = {
        "workers": config.worker_count,
        "wall_clock": time.perf_counter() - started,
        "stages": {k: v for k, v in sorted({**worker_time, **integrator.timings}.items())},
        "latency": ledger["latency"],
    }
    if not report.reconciles():
        raise AssertionError(f"run counts do not reconcile: {report.counts}")
    return working, report


def _ledger(gateway: Gateway, since: int) -> dict:
    calls = gateway.calls[since:]
    by_tag: dict[str, dict] = {}
    total = {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0, "attempts": 0}
    latency: dict[str, float] = defaultdict(float)
    for c in calls:
        row = by_tag.setdefault(c.tag, {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0, "attempts": 0})
        for r in (row, total):
            r["prompt_tokens"] += c.prompt_tokens
            r["completion_tokens"] += c.completion_tokens
            r["calls"] += 1
            r["attempts"] += c.attempts
        latency[c.tag] += c.latency
    return {"deterministic": {"by_tag": {k: by_tag[k] for k in sorted(by_tag)}, "total": total},
            "latency": {"by_tag": dict(sorted(latency.items())), "total": sum(latency.values())}}


# -- review queue ---------------------------------------------------------------


def export_review_queue(report: RunReport | dict, path: str | Path) -> int:
    """Write review-status triplets and schema candidates as JSON lines; returns the line count."""
    if isinstance(report, RunReport):
        report = report.to_dict()
    lines = list(report.get("review", [])) + list(report.get("schema_candidates", []))
    Path(path).write_text("".join(json.dumps(l, sort_keys=True, ensure_ascii=False) + "\n" for l in lines),
                          encoding="utf-8")
    return len(lines)


@dataclass
class ImportSummary:
    applied: int = 0
    rejected: int = 0
    undecided: int = 0
    skipped: int = 0
    warnings: list[str] = field(default_factory=list)


def _warn(summary: ImportSummary, msg: str) -> None:
    logger.warning(msg)
    summary.warnings.append(msg)
    summary.skipped += 1


def import_review_decisions(graph: KnowledgeGraph, path: str | Path) -> ImportSummary:
    """Apply accept/reject decisions in place. Accepting twice leaves the graph unchanged."""
    summary = ImportSummary()
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            _warn(summary, f"line {n}: not JSON, skipped")
            continue
        if not isinstance(rec, dict):
            _warn(summary, f"line {n}: not an object, skipped")
            continue
        decision = rec.get("decision")
        if decision is None:
            summary.undecided += 1
            continue
        if decision not in ("accept", "reject"):
            _warn(summary, f"line {n}: unknown decision {decision!r}, skipped")
            continue
        if decision == "reject":
            summary.rejected += 1
            continue
        kind = rec.get("kind", "triplet")
        try:
            if kind == "schema_candidate":
                _accept_schema(graph, rec)
            elif kind == "triplet":
                _accept_triplet(graph, rec)
            else:
                _warn(summary, f"line {n}: unknown kind {kind!r}, skipped")
                continue
        except (KeyError, TypeError, ValueError, GraphError) as exc:
            _warn(summary, f"line {n}: cannot apply ({type(exc).__name__}: {exc}), skipped")
            continue
        summary.applied += 1
    return summary


def _accept_schema(graph: KnowledgeGraph, rec: dict) -> None:
    name = rec["name"]
    if rec["category"] == "relation":
        graph.register_relation(name, candidate=False)
    elif rec["category"] == "type":
        graph.register_type(name, candidate=False)
        graph.candidate_types.discard(name)
    else:
        raise ValueError(f"unknown schema category {rec['category']!r}")


def _accept_triplet(graph: KnowledgeGraph, rec: dict) -> None:
    head, rel, tail = rec["head"], rec["relation"], rec["tail"]
    for e in rec.get("entities", []):
        if e["id"] in (head, tail):
            if e.get("entity_type", "Other") not in graph.type_set:
                graph.register_type(e["entity_type"])
            graph.upsert_entity(CanonicalEntity(e["id"], e["surface_forms"], e.get("entity_type", "Other"),
                                                e.get("provenance", "extracted")))
    for end in (head, tail):
        if end not in graph.entities:
            raise KeyError(f"unknown entity {end!r}")
    scores = rec.get("scores") or {}
    graph.integrate_triplet(Triplet(head, rel, tail, scores.get("confidence", 0.0),
                                    scores.get("clarity", 0.0), scores.get("relevance", 0.0),
                                    rec.get("source_doc", "review")))
