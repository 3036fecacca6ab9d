"""Relation extraction with per-relation confidence thresholds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

from ..gateway import Gateway
from ..graph import normalize_relation
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload
from .entities import NormalizedMention
from .summarizer import Summary

NEGATION_PREFIX = "not_"


@dataclass
class CandidateTriplet:
    head: str
    relation: str
    tail: str
    confidence: float
    doc_id: str
    seg_index: int
    order: int
    segment_relevance: float
    context: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)

    @property
    def self_loop(self) -> bool:
        return self.head == self.tail


Threshold = float | Mapping[str, float] | Callable[[str], float]


def threshold_fn(theta: Threshold, default: float = 0.5) -> Callable[[str], float]:
    if callable(theta):
        return theta
    if isinstance(theta, Mapping):
        return lambda rel: theta.get(rel, default)
    return lambda rel: float(theta)


def _resolver(entities: list[NormalizedMention]) -> dict[str, NormalizedMention]:
    table: dict[str, NormalizedMention] = {}
    for m in entities:
        keys = [m.entity.id, m.mention, *m.entity.surface_forms]
        if m.normalized_id != "N/A":
            keys.append(m.normalized_id)
        for k in keys:
            table.setdefault(k.casefold(), m)
    return table


def extract_relations(summary: Summary, entities: list[NormalizedMention], gateway: Gateway,
                      theta: Threshold, relation_vocab: list[str],
                      catalog: dict[str, PromptTemplate], audit: AuditLog) -> list[CandidateTriplet]:
    if summary.omitted or len(entities) < 2:
        return []
    payload = dumps_payload({
        "summary": summary.summary,
        "entities": [{"mention": m.mention, "type": m.entity_type,
                      "normalized_id": m.normalized_id} for m in entities],
    })
    msg = ask(gateway, catalog["REA"], {"relation_vocab": ", ".join(relation_vocab), "payload": payload},
              audit, "REA")
    if msg is None:
        return []
    threshold = threshold_fn(theta)
    table = _resolver(entities)
    out: list[CandidateTriplet] = []
    for item in msg.relationships:
        rel = normalize_relation(item.relation)
        if not rel:
            audit.add("dropped", "REA", f"empty relation in {item.head!r} -> {item.tail!r}")
            continue
        if rel.startswith(NEGATION_PREFIX):
            audit.add("negated", "REA", f"dropped negated relation {rel!r}")
            continue
        head = table.get(item.head.strip().casefold())
        tail = table.get(item.tail.strip().casefold())
        if head is None or tail is None:
            missing = item.head if head is None else item.tail
            audit.add("dropped", "REA", f"{missing!r} is not among the extracted entities")
            continue
        conf = item.effective_confidence
        if conf < threshold(rel):
            continue
        t = CandidateTriplet(head.entity_id, rel, tail.entity_id, conf, summary.doc_id,
                             summary.seg_index, len(out), summary.score, summary.summary)
        if t.self_loop:
            audit.add("self_loop", "REA", f"self-loop {t.key}")
        out.append(t)
    return out
