"""Enrichment quality measures over a before/after graph pair and a run report.

Every ratio is reported together with its denominator, and a ratio whose
denominator is zero is marked undefined (``null`` plus ``defined: false``)
rather than silently reported as 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .gateway import BackendError, Gateway
from .graph import KnowledgeGraph, Triplet
from .protocol import AuditLog, PromptTemplate, ask, dumps_payload, load_catalog

logger = logging.getLogger(__name__)

FIELDS = ("M_Con", "M_Cla", "M_Rel", "Delta_Cov", "Delta_Con", "Delta_Con_norm", "R_CR", "R_LC", "C_QA")


class IntegrityError(ValueError):
    """The after-graph lost an entity that the before-graph had."""


@dataclass
class MetricsReport:
    values: dict[str, float | int | None] = field(default_factory=lambda: {k: None for k in FIELDS})
    defined: dict[str, bool] = field(default_factory=lambda: {k: False for k in FIELDS})
    denominators: dict[str, int | float | None] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def set(self, name: str, value, denominator=None) -> None:
        self.values[name] = value
        self.defined[name] = value is not None
        if denominator is not None:
            self.denominators[name] = denominator

    def __getitem__(self, name: str):
        return self.values[name]

    def to_dict(self) -> dict:
        out: dict = {k: self.values[k] for k in FIELDS}
        out["defined"] = {k: self.defined[k] for k in FIELDS}
        out["denominators"] = dict(sorted(self.denominators.items()))
        out["counts"] = dict(sorted(self.counts.items()))
        if self.notes:
            out["notes"] = dict(sorted(self.notes.items()))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def new_edges(before: KnowledgeGraph, after: KnowledgeGraph) -> list[Triplet]:
    return [after.edges[k] for k in sorted(after.edges) if k not in before.edges]


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def core_metrics(edges: Iterable[Triplet]) -> tuple[float | None, float | None, float | None]:
    """Mean confidence, clarity and relevance; None for an empty edge set."""
    edges = list(edges)
    return (_mean([e.confidence for e in edges]), _mean([e.clarity for e in edges]),
            _mean([e.relevance for e in edges]))


@dataclass(frozen=True)
class GraphStats:
    coverage_gain: int
    connectivity_gain: int
    degree_before: int
    degree_after: int

    @property
    def connectivity_ratio(self) -> float | None:
        if self.degree_before == 0:
            return None
        return self.degree_after / self.degree_before


def graph_stats(before: KnowledgeGraph, after: KnowledgeGraph) -> GraphStats:
    missing = sorted(set(before.entities) - set(after.entities))
    if missing:
        raise IntegrityError(f"{len(missing)} entities vanished, e.g. {missing[0]!r}")
    old = list(before.entities)
    deg_before = before.degree_sum(old)
    deg_after = after.degree_sum(old)
    return GraphStats(len(after.entities) - len(before.entities), deg_after - deg_before,
                      deg_before, deg_after)


def conflict_ratio(report: dict) -> tuple[float | None, int, int]:
    """(ratio, removed by conflict resolution, candidate count); ratio None when undefined."""
    counts = report.get("counts", {})
    removed = int(counts.get("removed_by_cra", 0))
    total = int(counts.get("candidates", 0))
    if not report.get("config", {}).get("use_conflict_resolution", True) or total == 0:
        return None, removed, total
    return removed / total, removed, total


class Judge:
    """Model-backed verdicts with a per-key cache."""

    def __init__(self, gateway: Gateway, catalog: dict[str, PromptTemplate] | None = None,
                 audit: AuditLog | None = None):
        self.gateway = gateway
        self.catalog = catalog or load_catalog()
        self.audit = audit if audit is not None else AuditLog("metrics")
        self.cache: dict[tuple, str] = {}

    def _ask(self, agent: str, key: tuple, payload: dict, fallback: str) -> str:
        if key not in self.cache:
            msg = ask(self.gateway, self.catalog[agent], {"payload": dumps_payload(payload)}, self.audit, agent)
            self.cache[key] = fallback if msg is None else msg.verdict
        return self.cache[key]

    def triple(self, edge: Triplet, graph: KnowledgeGraph) -> str:
        def name(eid):
            ent = graph.entities.get(eid)
            return ent.primary_form if ent else eid
        payload = {"head": name(edge.head), "relation": edge.relation, "tail": name(edge.tail)}
        return self._ask("JUDGE_LC", ("LC",) + edge.key, payload, "uncertain")

    def answer(self, question: str, path: list[dict], answers: list[str]) -> str:
        payload = {"question": question, "path": path, "answer": answers}
        return self._ask("JUDGE_QA", ("QA", question, tuple(answers)), payload, "implausible")


def judge_correctness(edges: Iterable[Triplet], graph: KnowledgeGraph, judge: Judge) -> tuple[float | None, dict]:
    edges = list(edges)
    tally = {"likely correct": 0, "uncertain": 0, "likely incorrect": 0}
    for e in edges:
        tally[judge.triple(e, graph)] += 1
    ratio = tally["likely correct"] / len(edges) if edges else None
    return ratio, tally


@dataclass(frozen=True)
class QAItem:
    question: str
    expected_path: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.expected_path:
            raise ValueError("expected_path must be nonempty")


def load_qa(path: str | Path) -> list[QAItem]:
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            items.append(QAItem(d["question"], tuple((h[0], h[1]) for h in d["expected_path"])))
    return items


def traverse(graph: KnowledgeGraph, path: Iterable[tuple[str, str]]) -> tuple[list[dict], list[str]] | None:
    """Follow (entity, relation) hops; each hop's entity must be a tail of the previous hop.

    Returns the edges walked and the surface forms of the final tails, or None
    when some hop has no matching edge.
    """
    walked: list[dict] = []
    frontier: set[str] | None = None
    tails: list[str] = []
    for ref, relation in path:
        ent = graph.lookup(ref)
        if ent is None or (frontier is not None and ent.id not in frontier):
            return None
        edges = graph.out_edges(ent.id, relation)
        if not edges:
            return None
        walked.append({"head": ent.primary_form, "relation": relation,
                       "tails": [graph.entities[e.tail].primary_form for e in edges]})
        frontier = {e.tail for e in edges}
        tails = sorted(graph.entities[t].primary_form for t in frontier)
    return walked, tails


def qa_coherence(graph: KnowledgeGraph, items: list[QAItem], judge: Judge) -> tuple[float | None, dict]:
    tally = {"plausible": 0, "implausible": 0, "unanswered": 0}
    for item in items:
        found = traverse(graph, item.expected_path)
        if found is None:
            tally["unanswered"] += 1
            continue
        tally[judge.answer(item.question, *found)] += 1
    ratio = tally["plausible"] / len(items) if items else None
    return ratio, tally


def compute_metrics(before: KnowledgeGraph, after: KnowledgeGraph, report: dict | None = None,
                    qa: list[QAItem] | None = None, judge: Judge | None = None) -> MetricsReport:
    out = MetricsReport()
    fresh = new_edges(before, after)
    n = len(fresh)
    out.counts["new_edges"] = n
    for name, value in zip(("M_Con", "M_Cla", "M_Rel"), core_metrics(fresh)):
        out.set(name, value, n)

    stats = graph_stats(before, after)
    out.set("Delta_Cov", stats.coverage_gain)
    out.set("Delta_Con", stats.connectivity_gain)
    out.set("Delta_Con_norm", stats.connectivity_ratio, stats.degree_before)
    out.counts["degree_before"] = stats.degree_before
    out.counts["degree_after"] = stats.degree_after

    if report is not None:
        ratio, removed, total = conflict_ratio(report)
        out.set("R_CR", ratio, total)
        out.counts["removed_by_cra"] = removed
        out.counts["candidates"] = total
        if not report.get("config", {}).get("use_conflict_resolution", True):
            out.notes["R_CR"] = "conflict resolution disabled for this run"
    else:
        out.notes["R_CR"] = "no run report supplied"

    if judge is None:
        out.notes["R_LC"] = out.notes["C_QA"] = "judge disabled"
        return out
    try:
        ratio, tally = judge_correctness(fresh, after, judge)
        out.set("R_LC", ratio, n)
        out.counts.update({f"lc_{k.replace(' ', '_')}": v for k, v in tally.items()})
    except BackendError as exc:
        out.notes["R_LC"] = f"judge unavailable: {exc}"
    if qa:
        try:
            ratio, tally = qa_coherence(after, qa, judge)
            out.set("C_QA", ratio, len(qa))
            out.counts.update({f"qa_{k}": v for k, v in tally.items()})
        except BackendError as exc:
            out.notes["C_QA"] = f"judge unavailable: {exc}"
    else:
        out.notes["C_QA"] = "no QA set supplied"
    return out
