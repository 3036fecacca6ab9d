"""Conflict adjudication against existing edges, plus the local action policy."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..gateway import Gateway
from ..graph import Triplet
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload

ESCALATION = 0.7


@dataclass
class ConflictDecision:
    decision: str | None
    action: str
    rationale: str = ""
    conflicts: list[Triplet] = field(default_factory=list)
    called: bool = False


def choose_action(decision: str, new_confidence: float, existing_confidence: float,
                  escalation: float = ESCALATION) -> str:
    if decision == "Agree":
        return "integrate"
    if decision == "Ambiguous":
        return "review"
    if new_confidence >= escalation and existing_confidence >= escalation:
        return "review"
    return "discard"


def _side(t: Triplet) -> dict:
    return {"head": t.head, "relation": t.relation, "tail": t.tail, "confidence": t.confidence}


def resolve_conflict(t: Triplet, conflicts: list[Triplet], gateway: Gateway,
                     catalog: dict[str, PromptTemplate], audit: AuditLog,
                     escalation: float = ESCALATION, context: str = "") -> ConflictDecision:
    """Adjudicate ``t`` against the edges it clashes with.

    The model supplies the decision; the action comes from ``choose_action``.
    An unreadable reply sends the triplet to review.
    """
    if not conflicts:
        return ConflictDecision(None, "integrate", "no conflicting edges")
    payload = {"t_new": _side(t), "t_existing": _side(conflicts[0])}
    if len(conflicts) > 1:
        payload["also_conflicts_with"] = [_side(c) for c in conflicts[1:]]
    if context:
        payload["context"] = context
    msg = ask(gateway, catalog["CRA"], {"payload": dumps_payload(payload)}, audit, "CRA")
    if msg is None:
        return ConflictDecision(None, "review", "unreadable adjudication", list(conflicts), True)
    existing = max(c.confidence for c in conflicts)
    action = choose_action(msg.decision, t.confidence, existing, escalation)
    if action != msg.action:
        audit.add("policy_override", "CRA",
                  f"{t.key}: model suggested {msg.action}, policy chose {action}")
    return ConflictDecision(msg.decision, action, msg.rationale, list(conflicts), True)
