"""Type assignment for novel entities and mapping of unregistered relation labels."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..gateway import Gateway
from ..graph import CanonicalEntity, KnowledgeGraph, normalize_relation
from ..protocol import AuditLog, EntityAlignment, PromptTemplate, ask, dumps_payload


@dataclass(frozen=True)
class TypeAssignment:
    id: str
    proposed_type: str
    status: str


@dataclass(frozen=True)
class RelationMapping:
    relation: str
    closest_match: str | None
    status: str

    @property
    def target(self) -> str:
        """Label edges should carry after alignment."""
        return self.closest_match if self.status == "mapped" and self.closest_match else self.relation


@dataclass
class AlignmentResult:
    types: list[TypeAssignment] = field(default_factory=list)
    relations: list[RelationMapping] = field(default_factory=list)
    new_types: list[str] = field(default_factory=list)
    new_relations: list[str] = field(default_factory=list)

    def relation_map(self) -> dict[str, str]:
        return {m.relation: m.target for m in self.relations}


def pick_type(alignment: EntityAlignment, type_set: list[str]) -> str:
    """Proposed type, or the argmax of type_scores with ties going to the earlier type in ``type_set``."""
    if not alignment.type_scores:
        return alignment.proposed_type
    order = {t: i for i, t in enumerate(type_set)}
    ranked = sorted(alignment.type_scores.items(),
                    key=lambda kv: (-kv[1], order.get(kv[0], len(order))))
    return ranked[0][0]


def _match(entities: list[CanonicalEntity], ref: str) -> CanonicalEntity | None:
    folded = ref.casefold()
    for e in entities:
        if e.id == ref:
            return e
    for e in entities:
        if any(f.casefold() == folded for f in e.surface_forms):
            return e
    return None


def align_schema(unknown_entities: list[CanonicalEntity], unknown_relations: list[str],
                 graph: KnowledgeGraph, gateway: Gateway, catalog: dict[str, PromptTemplate],
                 audit: AuditLog) -> AlignmentResult:
    """Ask for types and relation mappings; mutate entity types and graph candidates in place."""
    result = AlignmentResult()
    relations = list(dict.fromkeys(normalize_relation(r) for r in unknown_relations))
    if not unknown_entities and not relations:
        return result
    payload = dumps_payload({
        "entities": [{"id": e.id, "mention": e.primary_form, "type": e.entity_type}
                     for e in unknown_entities],
        "relations": relations,
    })
    msg = ask(gateway, catalog["SAA"], {"type_set": ", ".join(graph.type_set),
                                        "relation_vocab": ", ".join(sorted(graph.relations)),
                                        "payload": payload}, audit, "SAA")
    if msg is None:
        audit.add("unaligned", "SAA", f"{len(unknown_entities)} entities and {len(relations)} relations left unaligned")
        for rel in relations:
            graph.register_relation(rel, candidate=True)
        return result

    for a in msg.alignments:
        ent = _match(unknown_entities, a.id)
        if ent is None:
            audit.add("unknown_ref", "SAA", f"alignment for unknown entity {a.id!r} ignored")
            continue
        etype = pick_type(a, graph.type_set)
        status = a.status
        if not etype:
            continue
        if etype not in graph.type_set:
            status = "new"
            graph.register_type(etype, candidate=True)
            result.new_types.append(etype)
        ent.entity_type = etype
        result.types.append(TypeAssignment(ent.id, etype, status))

    for t in msg.new_types or []:
        if t not in graph.type_set:
            graph.register_type(t, candidate=True)
            result.new_types.append(t)

    answered = set()
    for r in msg.new_relations:
        rel = normalize_relation(r.relation)
        if rel not in relations or rel in answered:
            audit.add("unknown_ref", "SAA", f"mapping for unrequested relation {r.relation!r} ignored")
            continue
        answered.add(rel)
        closest = normalize_relation(r.closest_match) if r.closest_match else None
        status = r.status
        if status == "mapped" and closest not in graph.relations:
            status = "new"
        if status == "new":
            graph.register_relation(rel, candidate=True)
            result.new_relations.append(rel)
        result.relations.append(RelationMapping(rel, closest, status))
    for rel in relations:
        if rel not in answered:
            graph.register_relation(rel, candidate=True)
            result.new_relations.append(rel)
            result.relations.append(RelationMapping(rel, None, "new"))
    return result
