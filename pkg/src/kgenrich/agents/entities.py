"""Entity extraction, dictionary filtering and normalization onto graph or novel ids."""

from __future__ import annotations

import copy
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..embedding import EmbeddingProvider, EntityIndex, NovelEntity, nearest_entity
from ..gateway import Gateway
from ..graph import CanonicalEntity, KnowledgeGraph
from ..protocol import AuditLog, PromptTemplate, ask
from .summarizer import Summary

logger = logging.getLogger(__name__)

LOCAL_PREFIX = "LOCAL:"
PENDING_PREFIX = "PENDING:"
_LOCAL_ID = re.compile(r"^LOCAL:(\d+)$")


@dataclass(frozen=True)
class DictionaryEntry:
    id: str
    names: tuple[str, ...]
    entity_type: str


class EntityDictionary:
    """Known ontology terms: id, synonyms and type. Lookups are case-insensitive."""

    def __init__(self, entries: Iterable[DictionaryEntry] = ()):
        self.by_id: dict[str, DictionaryEntry] = {}
        self.by_name: dict[str, DictionaryEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: DictionaryEntry) -> None:
        self.by_id[entry.id] = entry
        for name in entry.names:
            self.by_name.setdefault(name.casefold(), entry)

    def lookup(self, mention: str, normalized_id: str | None = None) -> DictionaryEntry | None:
        if normalized_id and normalized_id in self.by_id:
            return self.by_id[normalized_id]
        return self.by_name.get(mention.casefold())

    def __len__(self) -> int:
        return len(self.by_id)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.by_id

    @classmethod
    def loads(cls, text: str) -> "EntityDictionary":
        entries = []
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            d = json.loads(line)
            entries.append(DictionaryEntry(d["id"], tuple(d.get("names") or [d["id"]]),
                                           d.get("type", "Other")))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "EntityDictionary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class NormalizedMention:
    mention: str
    entity_type: str
    normalized_id: str
    entity: CanonicalEntity
    novel: bool
    in_dictionary: bool
    distance: float | None = None

    @property
    def entity_id(self) -> str:
        return self.entity.id


def _local_number(entity_id: str) -> int:
    m = _LOCAL_ID.match(entity_id)
    return int(m.group(1)) if m else 0


class NovelEntityRegistry:
    """Entities minted during a run that the starting graph did not contain.

    Mentions carrying an ontology id are keyed by it; the rest are matched by
    embedding against earlier novel entities and otherwise get a fresh
    ``LOCAL:nnnnn`` id. Single-writer: only the pipeline integrator calls it.
    """

    def __init__(self, provider: EmbeddingProvider, rho: float, existing_ids: Iterable[str] = ()):
        self.provider = provider
        self.rho = rho
        self.entities: dict[str, CanonicalEntity] = {}
        self.index = EntityIndex(dim=provider.dim)
        self.aligned: set[str] = set()
        self._next = 1 + max((_local_number(i) for i in existing_ids), default=0)

    def _add(self, entity: CanonicalEntity) -> CanonicalEntity:
        self.entities[entity.id] = entity
        self.index = self.index.with_entry(entity.id, self.provider.embed(entity.primary_form))
        return entity

    @staticmethod
    def _merge(into: CanonicalEntity, other: CanonicalEntity) -> CanonicalEntity:
        for f in other.surface_forms:
            if f not in into.surface_forms:
                into.surface_forms.append(f)
        if into.entity_type == "Other" and other.entity_type != "Other":
            into.entity_type = other.entity_type
        return into

    def resolve(self, entity: CanonicalEntity, ontology_id: str | None = None) -> CanonicalEntity:
        if ontology_id:
            if ontology_id in self.entities:
                return self._merge(self.entities[ontology_id], entity)
            return self._add(CanonicalEntity(ontology_id, list(entity.surface_forms),
                                             entity.entity_type, entity.provenance))
        hit = nearest_entity(self.index, self.provider.embed(entity.primary_form), self.rho)
        if not isinstance(hit, NovelEntity):
            return self._merge(self.entities[hit[0]], entity)
        new_id = f"{LOCAL_PREFIX}{self._next:05d}"
        self._next += 1
        return self._add(CanonicalEntity(new_id, list(entity.surface_forms),
                                         entity.entity_type, entity.provenance))

    def snapshot(self):
        return copy.deepcopy((self.entities, self.index, self.aligned, self._next))

    def restore(self, state) -> None:
        self.entities, self.index, self.aligned, self._next = state


def extract_entities(summary: Summary, dictionary: EntityDictionary, index: EntityIndex,
                     graph: KnowledgeGraph, gateway: Gateway, rho: float,
                     provider: EmbeddingProvider, catalog: dict[str, PromptTemplate],
                     audit: AuditLog, strict: bool = True,
                     registry: NovelEntityRegistry | None = None) -> list[NormalizedMention]:
    """Mentions in ``summary`` resolved to graph entities or novel candidates.

    Without a ``registry``, novel mentions that lack an ontology id keep a
    ``PENDING:`` placeholder id for the integrator to mint later.
    """
    if summary.omitted:
        return []
    type_list = [t for t in graph.type_set if t != "Other"]
    msg = ask(gateway, catalog["EEA"], {"type_set": ", ".join(type_list), "summary": summary.summary},
              audit, "EEA")
    if msg is None:
        return []
    out: list[NormalizedMention] = []
    seen: set[str] = set()
    for item in msg.entities:
        mention = " ".join(item.mention.split())
        key = mention.casefold()
        if not mention or key in seen:
            continue
        entry = dictionary.lookup(mention, item.normalized_id)
        typed = item.type in graph.type_set and item.type != "Other"
        if strict and entry is None and not typed:
            audit.add("filtered", "EEA", f"dropped {mention!r} typed {item.type!r}: not a known term")
            continue
        seen.add(key)
        if entry is not None and entry.entity_type in graph.type_set:
            etype = entry.entity_type
        else:
            etype = item.type if item.type in graph.type_set else "Other"
        onto_id = item.normalized_id if item.normalized_id != "N/A" else (entry.id if entry else None)

        found = graph.entities.get(onto_id) if onto_id else None
        distance = 0.0 if found else None
        if found is None:
            found = graph.lookup(mention)
            distance = 0.0 if found else None
        if found is None:
            hit = nearest_entity(index, provider.embed(mention), rho)
            if isinstance(hit, NovelEntity):
                distance = hit.distance
            else:
                found, distance = graph.entities.get(hit[0]), hit[1]
        if found is not None:
            out.append(NormalizedMention(mention, found.entity_type, item.normalized_id, found,
                                         False, entry is not None, distance))
            continue
        candidate = CanonicalEntity(onto_id or f"{PENDING_PREFIX}{key}", [mention], etype, "extracted")
        if registry is not None:
            candidate = registry.resolve(candidate, onto_id)
        out.append(NormalizedMention(mention, etype, item.normalized_id, candidate, True,
                                     entry is not None, distance))
    return out
