"""Knowledge graph data model: entities, triplets, incompatibility rules, persistence."""

from __future__ import annotations

import copy
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

DEFAULT_TYPES = (
    "Disease", "Drug", "Gene", "Protein", "Chemical", "RNA", "Pathway", "Phenotype", "Other",
)
DEFAULT_RELATIONS = (
    "treats", "causes", "inhibits", "activates", "interacts_with", "associated_with",
    "upregulates", "downregulates",
)
DEFAULT_INCOMPATIBLE = (
    ("treats", "causes"),
    ("inhibits", "activates"),
    ("upregulates", "downregulates"),
)
STATUSES = ("candidate", "integrated", "discarded", "review")
SCORE_DECIMALS = 6


class GraphError(Exception):
    pass


class SchemaViolation(GraphError):
    pass


class DanglingEdgeError(GraphError):
    pass


class MissingEntityError(GraphError):
    pass


_CAMEL = re.compile(r"(?<=[a-z0-9])(?=[A-Z])")


def normalize_relation(name: str) -> str:
    """Lowercase relation label with words joined by underscores.

    ``interactsWith`` and ``interacts with`` both become ``interacts_with``.
    """
    name = _CAMEL.sub("_", name.strip())
    name = re.sub(r"[\s\-]+", "_", name.lower())
    return re.sub(r"_+", "_", name).strip("_")


@dataclass(frozen=True)
class RelationType:
    name: str
    registered: bool = False

    def __post_init__(self):
        if not self.name or self.name != normalize_relation(self.name):
            raise ValueError(f"relation name not normalized: {self.name!r}")


@dataclass
class CanonicalEntity:
    id: str
    surface_forms: list[str]
    entity_type: str = "Other"
    provenance: str = "extracted"

    def __post_init__(self):
        if isinstance(self.surface_forms, str):
            self.surface_forms = [self.surface_forms]
        forms: list[str] = []
        for f in self.surface_forms:
            if f and f not in forms:
                forms.append(f)
        self.surface_forms = forms
        if not self.id:
            raise SchemaViolation("entity id must be non-empty")
        if not self.surface_forms:
            raise SchemaViolation(f"entity {self.id} has no surface forms")

    @property
    def primary_form(self) -> str:
        return self.surface_forms[0]


def _clamp_score(x: float) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"score out of [0,1]: {x}")
    return round(x, SCORE_DECIMALS)


@dataclass
class Triplet:
    head: str
    relation: str
    tail: str
    confidence: float = 0.0
    clarity: float = 0.0
    relevance: float = 0.0
    source_doc: str = ""
    status: str = "candidate"

    def __post_init__(self):
        self.relation = normalize_relation(self.relation)
        if not self.relation:
            raise ValueError("empty relation")
        for ch in ("confidence", "clarity", "relevance"):
            setattr(self, ch, _clamp_score(getattr(self, ch)))
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)

    @property
    def self_loop(self) -> bool:
        return self.head == self.tail

    def scores(self) -> tuple[float, float, float]:
        return (self.confidence, self.clarity, self.relevance)


class IncompatibilityTable:
    """Symmetric set of relation pairs that contradict each other on the same (head, tail)."""

    def __init__(self, pairs: Iterable[tuple[str, str]] = DEFAULT_INCOMPATIBLE):
        self._pairs: set[frozenset[str]] = set()
        for a, b in pairs:
            self.add(a, b)

    def add(self, a: str, b: str) -> None:
        a, b = normalize_relation(a), normalize_relation(b)
        if a == b:
            raise ValueError(f"relation {a!r} cannot be incompatible with itself")
        self._pairs.add(frozenset((a, b)))

    def incompatible(self, a: str, b: str) -> bool:
        return a != b and frozenset((a, b)) in self._pairs

    def pairs(self) -> list[tuple[str, str]]:
        return sorted(tuple(sorted(p)) for p in self._pairs)

    def __contains__(self, pair) -> bool:
        a, b = pair
        return self.incompatible(a, b)

    def __eq__(self, other) -> bool:
        return isinstance(other, IncompatibilityTable) and self._pairs == other._pairs


class KnowledgeGraph:
    """Mutable (V, E) with typed nodes and score-annotated edges.

    Reads are safe from many threads; mutation must go through a single writer.
    """

    def __init__(
        self,
        type_set: Iterable[str] = DEFAULT_TYPES,
        relations: Iterable[str] = DEFAULT_RELATIONS,
        incompatibility: IncompatibilityTable | None = None,
    ):
        self.entities: dict[str, CanonicalEntity] = {}
        self.edges: dict[tuple[str, str, str], Triplet] = {}
        self.type_set: list[str] = list(dict.fromkeys(type_set))
        self.relations: set[str] = {normalize_relation(r) for r in relations}
        self.candidate_types: set[str] = set()
        self.candidate_relations: set[str] = set()
        self.incompatibility = incompatibility or IncompatibilityTable()
        self._by_pair: dict[tuple[str, str], set[str]] = {}
        self._degree: dict[str, int] = {}

    # -- schema -----------------------------------------------------------

    def register_type(self, name: str, candidate: bool = True) -> None:
        if name not in self.type_set:
            self.type_set.append(name)
            if candidate:
                self.candidate_types.add(name)

    def register_relation(self, name: str, candidate: bool = True) -> str:
        name = normalize_relation(name)
        if candidate:
            if name not in self.relations:
                self.candidate_relations.add(name)
        else:
            self.relations.add(name)
            self.candidate_relations.discard(name)
        return name

    def relation_type(self, name: str) -> RelationType:
        name = normalize_relation(name)
        return RelationType(name, registered=name in self.relations)

    # -- mutation ---------------------------------------------------------

    def upsert_entity(self, entity: CanonicalEntity) -> str:
        if entity.entity_type not in self.type_set:
            raise SchemaViolation(
                f"type {entity.entity_type!r} of {entity.id} not in type set"
            )
        existing = self.entities.get(entity.id)
        if existing is None:
            self.entities[entity.id] = CanonicalEntity(
                entity.id, list(entity.surface_forms), entity.entity_type, entity.provenance
            )
            self._degree.setdefault(entity.id, 0)
        else:
            for f in entity.surface_forms:
                if f not in existing.surface_forms:
                    existing.surface_forms.append(f)
            if existing.entity_type == "Other" and entity.entity_type != "Other":
                existing.entity_type = entity.entity_type
        return entity.id

    def integrate_triplet(self, t: Triplet) -> str:
        """Insert or merge an edge: ``inserted``, ``merged`` or ``rejected_duplicate``.

        Merging keeps the elementwise max of each score channel, so the result
        does not depend on insertion order.
        """
        for end in (t.head, t.tail):
            if end not in self.entities:
                raise DanglingEdgeError(f"edge endpoint {end!r} not in graph")
        if t.self_loop:
            logger.info("self-loop edge %s", t.key)
        current = self.edges.get(t.key)
        if current is not None and t.status == "integrated":
            return "rejected_duplicate"
        if current is None:
            stored = Triplet(t.head, t.relation, t.tail, t.confidence, t.clarity,
                             t.relevance, t.source_doc, "integrated")
            self.edges[t.key] = stored
            self._by_pair.setdefault((t.head, t.tail), set()).add(t.relation)
            self._degree[t.head] += 1
            self._degree[t.tail] += 1
            outcome = "inserted"
        else:
            current.confidence = max(current.confidence, t.confidence)
            current.clarity = max(current.clarity, t.clarity)
            current.relevance = max(current.relevance, t.relevance)
            outcome = "merged"
        t.status = "integrated"
        return outcome

    # -- queries ----------------------------------------------------------

    def find_conflicts(self, t: Triplet) -> list[Triplet]:
        """Existing edges on the same (head, tail) whose relation is incompatible with t's."""
        rels = self._by_pair.get((t.head, t.tail), ())
        return [
            self.edges[(t.head, r, t.tail)]
            for r in sorted(rels)
            if self.incompatibility.incompatible(t.relation, r)
        ]

    def degree(self, entity_id: str) -> int:
        if entity_id not in self.entities:
            raise MissingEntityError(entity_id)
        return self._degree.get(entity_id, 0)

    def degree_sum(self, entity_ids: Iterable[str]) -> int:
        return sum(self.degree(e) for e in set(entity_ids))

    def lookup(self, name_or_id: str) -> CanonicalEntity | None:
        if name_or_id in self.entities:
            return self.entities[name_or_id]
        folded = name_or_id.casefold()
        for ent in self.entities.values():
            if any(f.casefold() == folded for f in ent.surface_forms):
                return ent
        return None

    def out_edges(self, entity_id: str, relation: str | None = None) -> list[Triplet]:
        return [
            e for k, e in sorted(self.edges.items())
            if k[0] == entity_id and (relation is None or k[1] == relation)
        ]

    def digest(self) -> dict:
        """Compact schema summary handed to the reader in place of the whole graph."""
        return {
            "types": list(self.type_set),
            "relations": sorted(self.relations),
            "entity_count": len(self.entities),
            "edge_count": len(self.edges),
        }

    def copy(self) -> "KnowledgeGraph":
        return copy.deepcopy(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.edges == other.edges
            and self.type_set == other.type_set
            and self.relations == other.relations
            and self.candidate_types == other.candidate_types
            and self.candidate_relations == other.candidate_relations
            and self.incompatibility == other.incompatibility
        )

    def __len__(self) -> int:
        return len(self.edges)

    # -- persistence ------------------------------------------------------

    def iter_records(self) -> Iterator[dict]:
        yield {
            "kind": "schema",
            "types": list(self.type_set),
            "relations": sorted(self.relations),
            "candidate_types": sorted(self.candidate_types),
            "candidate_relations": sorted(self.candidate_relations),
            "incompatible": [list(p) for p in self.incompatibility.pairs()],
        }
        for eid in sorted(self.entities):
            e = self.entities[eid]
            yield {
                "kind": "entity",
                "id": e.id,
                "surface_forms": list(e.surface_forms),
                "entity_type": e.entity_type,
                "provenance": e.provenance,
            }
        for key in sorted(self.edges):
            t = self.edges[key]
            yield {
                "kind": "edge",
                "head": t.head,
                "relation": t.relation,
                "tail": t.tail,
                "confidence": round(t.confidence, SCORE_DECIMALS),
                "clarity": round(t.clarity, SCORE_DECIMALS),
                "relevance": round(t.relevance, SCORE_DECIMALS),
                "source_doc": t.source_doc,
            }

    def dumps(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.iter_records())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "KnowledgeGraph":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        schema = next((r for r in records if r.get("kind") == "schema"), None)
        if schema:
            g = cls(
                schema.get("types", DEFAULT_TYPES),
                schema.get("relations", DEFAULT_RELATIONS),
                IncompatibilityTable(tuple(p) for p in schema.get("incompatible", DEFAULT_INCOMPATIBLE)),
            )
            g.candidate_types = set(schema.get("candidate_types", ()))
            g.candidate_relations = set(schema.get("candidate_relations", ()))
        else:
            g = cls()
        for r in records:
            if r.get("kind") == "entity":
                etype = r.get("entity_type", "Other")
                if etype not in g.type_set:
                    g.register_type(etype)
                g.upsert_entity(CanonicalEntity(
                    r["id"], r.get("surface_forms") or [r["id"]], etype,
                    r.get("provenance", "preexisting"),
                ))
        for r in records:
            if r.get("kind") == "edge":
                if schema is None:
                    g.register_relation(r["relation"], candidate=False)
                g.integrate_triplet(Triplet(
                    r["head"], r["relation"], r["tail"],
                    r.get("confidence", 0.0), r.get("clarity", 0.0), r.get("relevance", 0.0),
                    r.get("source_doc", ""),
                ))
        return g

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
