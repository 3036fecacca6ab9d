"""Prompt catalog, message schemas and tolerant-but-strict parsing of agent output."""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .gateway import ChatRequest, Gateway

logger = logging.getLogger(__name__)

REPAIR_INSTRUCTION = "Return ONLY valid JSON matching the schema."
USER_SPLIT = "=== user ==="
MAX_DEPTH = 64

_PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")
_PREFIXED_ID = re.compile(r"^[A-Za-z][A-Za-z0-9_.\-]*:\S+$")


class ProtocolError(ValueError):
    pass


class TemplateError(ProtocolError):
    pass


class Unparseable(ProtocolError):
    """No JSON object or array could be found in the model output."""


class InvalidMessage(ProtocolError):
    """JSON was found but does not match the agent's message schema."""


# -- templates --------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    agent: str
    body: str
    version: str = "1"

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.body))

    def render(self, bindings: dict[str, str]) -> str:
        return render(self.body, bindings)

    def request(self, bindings: dict[str, str], tag: str | None = None, **kw) -> ChatRequest:
        text = self.render(bindings)
        system, sep, user = text.partition(USER_SPLIT)
        if not sep:
            raise TemplateError(f"{self.agent} template lacks a '{USER_SPLIT}' line")
        return ChatRequest(system.strip(), user.strip(), tag or self.agent, **kw)


def render(template: str | PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute ``{name}`` placeholders. Other braces (JSON examples) are left alone."""
    body = template.body if isinstance(template, PromptTemplate) else template
    missing = sorted(set(_PLACEHOLDER.findall(body)) - set(bindings))
    if missing:
        raise TemplateError(f"unbound placeholders: {', '.join(missing)}")
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), body)


REQUIRED_PLACEHOLDERS = {
    "IA": {"payload"},
    "RA": {"payload", "kg_digest"},
    "SA": {"payload", "max_words"},
    "EEA": {"summary", "type_set"},
    "REA": {"payload", "relation_vocab"},
    "SAA": {"payload", "type_set", "relation_vocab"},
    "CRA": {"payload"},
    "EA_CONFIDENCE": {"payload"},
    "EA_CLARITY": {"payload"},
    "EA_RELEVANCE": {"payload"},
    "JUDGE_LC": {"payload"},
    "JUDGE_QA": {"payload"},
}


def parse_template_file(text: str) -> PromptTemplate:
    if not text.startswith("---"):
        raise TemplateError("template lacks front-matter")
    _, head, body = text.split("---", 2)
    meta = {}
    for line in head.strip().splitlines():
        k, _, v = line.partition(":")
        meta[k.strip()] = v.strip()
    if "agent" not in meta:
        raise TemplateError("front-matter lacks 'agent'")
    return PromptTemplate(meta["agent"], body.strip("\n"), meta.get("version", "1"))


def load_catalog(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    if directory is None:
        files = [f for f in resources.files("kgenrich").joinpath("prompts").iterdir()
                 if f.name.endswith(".txt")]
    else:
        files = sorted(Path(directory).glob("*.txt"))
    catalog = {}
    for f in files:
        tpl = parse_template_file(f.read_text(encoding="utf-8"))
        missing = REQUIRED_PLACEHOLDERS.get(tpl.agent, set()) - tpl.placeholders
        if missing:
            raise TemplateError(f"{tpl.agent} template missing placeholders {sorted(missing)}")
        catalog[tpl.agent] = tpl
    return catalog


# -- audit ------------------------------------------------------------------


@dataclass
class AuditRecord:
    kind: str
    stage: str
    detail: str
    doc_id: str = ""
    raw: str | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "stage": self.stage, "doc_id": self.doc_id, "detail": self.detail}
        if self.raw is not None:
            d["raw"] = self.raw
        return d


class AuditLog:
    def __init__(self, doc_id: str = ""):
        self.doc_id = doc_id
        self.records: list[AuditRecord] = []
        self._lock = threading.Lock()

    def add(self, kind: str, stage: str, detail: str, raw: str | None = None, doc_id: str | None = None) -> AuditRecord:
        rec = AuditRecord(kind, stage, detail, self.doc_id if doc_id is None else doc_id, raw)
        with self._lock:
            self.records.append(rec)
        logger.debug("audit %s/%s: %s", stage, kind, detail)
        return rec

    def extend(self, other: "AuditLog") -> None:
        with self._lock:
            self.records.extend(other.records)

    def of_kind(self, kind: str) -> list[AuditRecord]:
        return [r for r in self.records if r.kind == kind]

    def __len__(self) -> int:
        return len(self.records)

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


# -- JSON extraction --------------------------------------------------------


def _balanced_end(text: str, start: int) -> int | None:
    """Index one past the bracket closing text[start], honoring JSON strings."""
    stack = []
    in_str = False
    esc = False
    pairs = {"{": "}", "[": "]"}
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in pairs:
            stack.append(pairs[ch])
            if len(stack) > MAX_DEPTH:
                return None
        elif ch in "}]":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return i + 1
    return None


def extract_json(raw: str | bytes) -> dict | list:
    """First JSON object, or array of objects, embedded in free text."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    for m in re.finditer(r"[\[{]", raw):
        end = _balanced_end(raw, m.start())
        if end is None:
            continue
        try:
            value = json.loads(raw[m.start():end])
        except (ValueError, RecursionError):
            continue
        if isinstance(value, dict):
            return value
        if isinstance(value, list) and all(isinstance(v, dict) for v in value):
            return value
    raise Unparseable("no JSON object found in model output")


# -- message schemas --------------------------------------------------------


def _req_str(d: dict, key: str, where: str) -> str:
    v = d.get(key)
    if not isinstance(v, str) or not v.strip():
        raise InvalidMessage(f"{where}: '{key}' must be a non-empty string")
    return v


def _opt_str(d: dict, key: str, where: str) -> str | None:
    v = d.get(key)
    if v is None:
        return None
    if not isinstance(v, str):
        raise InvalidMessage(f"{where}: '{key}' must be a string")
    return v


def _score(v: Any, where: str, key: str, required: bool = True) -> float | None:
    if v is None and not required:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                raise InvalidMessage(f"{where}: '{key}' is not a number") from None
        else:
            raise InvalidMessage(f"{where}: '{key}' is not a number")
    v = float(v)
    if not math.isfinite(v) or not 0.0 <= v <= 1.0:
        raise InvalidMessage(f"{where}: '{key}'={v} outside [0, 1]")
    return v


def _items(d: dict, key: str, where: str) -> list[dict]:
    v = d.get(key)
    if not isinstance(v, list) or not all(isinstance(x, dict) for x in v):
        raise InvalidMessage(f"{where}: '{key}' must be a list of objects")
    return v


def _warn_unknown(d: dict, known: set[str], where: str) -> None:
    extra = set(d) - known
    if extra:
        logger.warning("%s: ignoring unknown fields %s", where, sorted(extra))


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


@dataclass
class IngestMessage:
    metadata: dict
    content: str
    error: bool | None = None

    @classmethod
    def from_json(cls, d: dict) -> "IngestMessage":
        _warn_unknown(d, {"metadata", "content", "error"}, "IA")
        meta = d.get("metadata")
        if not isinstance(meta, dict):
            raise InvalidMessage("IA: 'metadata' must be an object")
        content = d.get("content")
        if isinstance(content, list):
            content = "\n\n".join(str(c) for c in content)
        if not isinstance(content, str):
            raise InvalidMessage("IA: 'content' must be a string")
        err = d.get("error")
        if err is not None and not isinstance(err, bool):
            raise InvalidMessage("IA: 'error' must be a boolean")
        return cls(meta, content, err)

    def to_json(self) -> dict:
        return _drop_none({"metadata": self.metadata, "content": self.content, "error": self.error})


@dataclass
class ScoredSegment:
    text: str
    score: float


@dataclass
class ReaderMessage:
    segments: list[ScoredSegment]

    @classmethod
    def from_json(cls, d: dict) -> "ReaderMessage":
        _warn_unknown(d, {"segments"}, "RA")
        segs = []
        for s in _items(d, "segments", "RA"):
            text = s.get("text", "")
            if not isinstance(text, str):
                raise InvalidMessage("RA: segment 'text' must be a string")
            segs.append(ScoredSegment(text, _score(s.get("score"), "RA", "score")))
        return cls(segs)

    def to_json(self) -> dict:
        return {"segments": [{"text": s.text, "score": s.score} for s in self.segments]}


@dataclass
class SummaryItem:
    original_text: str
    summary: str
    score: float | None = None


@dataclass
class SummarizerMessage:
    summaries: list[SummaryItem]

    @classmethod
    def from_json(cls, d: dict) -> "SummarizerMessage":
        _warn_unknown(d, {"summaries"}, "SA")
        items = []
        for s in _items(d, "summaries", "SA"):
            items.append(SummaryItem(
                _opt_str(s, "original_text", "SA") or "",
                _req_str(s, "summary", "SA"),
                _score(s.get("score"), "SA", "score", required=False),
            ))
        return cls(items)

    def to_json(self) -> dict:
        return {"summaries": [_drop_none({"original_text": s.original_text, "summary": s.summary,
                                          "score": s.score}) for s in self.summaries]}


@dataclass
class EntityItem:
    mention: str
    type: str
    normalized_id: str = "N/A"


@dataclass
class EntityMessage:
    entities: list[EntityItem]

    @classmethod
    def from_json(cls, d: dict) -> "EntityMessage":
        _warn_unknown(d, {"entities"}, "EEA")
        out = []
        for e in _items(d, "entities", "EEA"):
            nid = _opt_str(e, "normalized_id", "EEA") or "N/A"
            nid = nid.strip()
            if nid != "N/A" and not _PREFIXED_ID.match(nid):
                raise InvalidMessage(f"EEA: normalized_id {nid!r} is neither prefixed nor N/A")
            out.append(EntityItem(_req_str(e, "mention", "EEA"), _opt_str(e, "type", "EEA") or "Other", nid))
        return cls(out)

    def to_json(self) -> dict:
        return {"entities": [{"mention": e.mention, "type": e.type, "normalized_id": e.normalized_id}
                             for e in self.entities]}


@dataclass
class RelationItem:
    head: str
    relation: str
    tail: str
    confidence: float | None = None

    @property
    def effective_confidence(self) -> float:
        return 1.0 if self.confidence is None else self.confidence


@dataclass
class RelationMessage:
    relationships: list[RelationItem]

    @classmethod
    def from_json(cls, d: dict) -> "RelationMessage":
        _warn_unknown(d, {"relationships"}, "REA")
        out = []
        for r in _items(d, "relationships", "REA"):
            out.append(RelationItem(
                _req_str(r, "head", "REA"), _req_str(r, "relation", "REA"), _req_str(r, "tail", "REA"),
                _score(r.get("confidence"), "REA", "confidence", required=False),
            ))
        return cls(out)

    def to_json(self) -> dict:
        return {"relationships": [_drop_none({"head": r.head, "relation": r.relation, "tail": r.tail,
                                              "confidence": r.confidence}) for r in self.relationships]}


ALIGN_STATUS = ("mapped", "new")


@dataclass
class EntityAlignment:
    id: str
    proposed_type: str
    status: str
    type_scores: dict[str, float] | None = None


@dataclass
class RelationAlignment:
    relation: str
    closest_match: str | None
    status: str


@dataclass
class SchemaMessage:
    alignments: list[EntityAlignment]
    new_relations: list[RelationAlignment] = field(default_factory=list)
    new_types: list[str] | None = None

    @classmethod
    def from_json(cls, d: dict) -> "SchemaMessage":
        _warn_unknown(d, {"alignments", "new_relations", "new_types"}, "SAA")
        al = []
        for a in _items(d, "alignments", "SAA") if "alignments" in d else []:
            status = _req_str(a, "status", "SAA")
            if status not in ALIGN_STATUS:
                raise InvalidMessage(f"SAA: status {status!r} not in {ALIGN_STATUS}")
            scores = a.get("type_scores")
            if scores is not None:
                if not isinstance(scores, dict):
                    raise InvalidMessage("SAA: type_scores must be an object")
                scores = {str(k): _score(v, "SAA", "type_scores") for k, v in scores.items()}
            ptype = _opt_str(a, "proposed_type", "SAA") or _opt_str(a, "type", "SAA")
            if not ptype and not scores:
                raise InvalidMessage("SAA: alignment needs proposed_type or type_scores")
            al.append(EntityAlignment(_req_str(a, "id", "SAA"), ptype or "", status, scores))
        rels = []
        for r in _items(d, "new_relations", "SAA") if "new_relations" in d else []:
            status = _req_str(r, "status", "SAA")
            if status not in ALIGN_STATUS:
                raise InvalidMessage(f"SAA: status {status!r} not in {ALIGN_STATUS}")
            rels.append(RelationAlignment(_req_str(r, "relation", "SAA"),
                                          _opt_str(r, "closest_match", "SAA"), status))
        if "alignments" not in d and "new_relations" not in d:
            raise InvalidMessage("SAA: message has neither alignments nor new_relations")
        new_types = d.get("new_types")
        if new_types is not None and not (isinstance(new_types, list) and all(isinstance(t, str) for t in new_types)):
            raise InvalidMessage("SAA: new_types must be a list of strings")
        return cls(al, rels, new_types)

    def to_json(self) -> dict:
        out: dict = {"alignments": [_drop_none({"id": a.id, "proposed_type": a.proposed_type,
                                                "status": a.status, "type_scores": a.type_scores})
                                    for a in self.alignments]}
        if self.new_relations:
            out["new_relations"] = [_drop_none({"relation": r.relation, "closest_match": r.closest_match,
                                                "status": r.status}) for r in self.new_relations]
        if self.new_types is not None:
            out["new_types"] = self.new_types
        return out


DECISIONS = ("Contradict", "Agree", "Ambiguous")
ACTIONS = ("discard", "review", "integrate")


@dataclass
class ConflictMessage:
    decision: str
    action: str
    rationale: str = ""

    @classmethod
    def from_json(cls, d: dict) -> "ConflictMessage":
        _warn_unknown(d, {"decision", "resolution"}, "CRA")
        decision = d.get("decision")
        if decision not in DECISIONS:
            raise InvalidMessage(f"CRA: decision {decision!r} not in {DECISIONS}")
        res = d.get("resolution")
        if not isinstance(res, dict):
            raise InvalidMessage("CRA: 'resolution' must be an object")
        action = res.get("action")
        if action not in ACTIONS:
            raise InvalidMessage(f"CRA: action {action!r} not in {ACTIONS}")
        return cls(decision, action, _opt_str(res, "rationale", "CRA") or "")

    def to_json(self) -> dict:
        return {"decision": self.decision,
                "resolution": {"action": self.action, "rationale": self.rationale}}


@dataclass
class ScoredTriplet:
    head: str
    relation: str
    tail: str
    value: float


@dataclass
class EvaluationMessage:
    channel: str  # final_confidence | final_clarity | final_relevance
    final_triplets: list[ScoredTriplet]

    @classmethod
    def parser(cls, channel: str) -> Callable[[dict], "EvaluationMessage"]:
        def parse(d: dict) -> "EvaluationMessage":
            where = f"EA({channel})"
            _warn_unknown(d, {"final_triplets"}, where)
            items = []
            for t in _items(d, "final_triplets", where):
                items.append(ScoredTriplet(
                    _req_str(t, "head", where), _req_str(t, "relation", where), _req_str(t, "tail", where),
                    _score(t.get(channel), where, channel),
                ))
            return cls(channel, items)
        return parse

    def lookup(self, head: str, relation: str, tail: str) -> float | None:
        for t in self.final_triplets:
            if (t.head, t.relation, t.tail) == (head, relation, tail):
                return t.value
        if len(self.final_triplets) == 1:
            return self.final_triplets[0].value
        return None

    def to_json(self) -> dict:
        return {"final_triplets": [{"head": t.head, "relation": t.relation, "tail": t.tail,
                                    self.channel: t.value} for t in self.final_triplets]}


LC_VERDICTS = ("likely correct", "uncertain", "likely incorrect")
QA_VERDICTS = ("plausible", "implausible")


@dataclass
class VerdictMessage:
    verdict: str

    @classmethod
    def parser(cls, allowed: tuple[str, ...]) -> Callable[[dict], "VerdictMessage"]:
        def parse(d: dict) -> "VerdictMessage":
            v = d.get("verdict")
            if not isinstance(v, str) or v.strip().lower() not in allowed:
                raise InvalidMessage(f"judge verdict {v!r} not in {allowed}")
            return cls(v.strip().lower())
        return parse

    def to_json(self) -> dict:
        return {"verdict": self.verdict}


# list-valued field each agent's payload lives under, for bare-array replies
_LIST_FIELD = {
    "RA": "segments", "SA": "summaries", "EEA": "entities", "REA": "relationships",
    "SAA": "alignments", "EA_CONFIDENCE": "final_triplets", "EA_CLARITY": "final_triplets",
    "EA_RELEVANCE": "final_triplets",
}

PARSERS: dict[str, Callable[[dict], Any]] = {
    "IA": IngestMessage.from_json,
    "RA": ReaderMessage.from_json,
    "SA": SummarizerMessage.from_json,
    "EEA": EntityMessage.from_json,
    "REA": RelationMessage.from_json,
    "SAA": SchemaMessage.from_json,
    "CRA": ConflictMessage.from_json,
    "EA_CONFIDENCE": EvaluationMessage.parser("final_confidence"),
    "EA_CLARITY": EvaluationMessage.parser("final_clarity"),
    "EA_RELEVANCE": EvaluationMessage.parser("final_relevance"),
    "JUDGE_LC": VerdictMessage.parser(LC_VERDICTS),
    "JUDGE_QA": VerdictMessage.parser(QA_VERDICTS),
}


def parse_message(agent: str, raw: str | bytes, audit: AuditLog | None = None, kind: str = "parse_failure"):
    """Parse one agent reply. On failure, records exactly one audit entry and re-raises."""
    if agent not in PARSERS:
        raise KeyError(f"unknown agent {agent!r}")
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    try:
        value = extract_json(raw)
        if isinstance(value, list):
            if agent not in _LIST_FIELD:
                raise InvalidMessage(f"{agent}: expected an object, got an array")
            value = {_LIST_FIELD[agent]: value}
        return PARSERS[agent](value)
    except ProtocolError as exc:
        if audit is not None:
            audit.add(kind, agent, str(exc), raw=raw)
        raise
    except Exception as exc:  # parser bug or pathological input: never escape as a crash
        err = InvalidMessage(f"{agent}: {type(exc).__name__}: {exc}")
        if audit is not None:
            audit.add(kind, agent, str(err), raw=raw)
        raise err from exc


def repair_and_retry(gateway: Gateway, req: ChatRequest, failure: ProtocolError, agent: str,
                     audit: AuditLog):
    """Re-ask once with a corrective instruction. Returns the message or None (skipped)."""
    retry = ChatRequest(req.system_prompt, f"{req.user_payload}\n\n{REPAIR_INSTRUCTION}", req.tag,
                        req.temperature, req.max_tokens, req.model)
    logger.info("%s: re-asking after parse failure: %s", agent, failure)
    resp = gateway.complete(retry)
    try:
        return parse_message(agent, resp.text, audit, kind="skip")
    except ProtocolError:
        logger.warning("%s: reply still invalid after repair, item skipped", agent)
        return None


def ask(gateway: Gateway, template: PromptTemplate, bindings: dict[str, str], audit: AuditLog,
        agent: str | None = None):
    """Render, call, parse; one repair retry on parse failure. None means skipped."""
    agent = agent or template.agent
    req = template.request(bindings, tag=agent)
    resp = gateway.complete(req)
    try:
        return parse_message(agent, resp.text, audit)
    except ProtocolError as exc:
        return repair_and_retry(gateway, req, exc, agent, audit)


def dumps_payload(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=None)
