"""Sigmoid-weighted fusion of verification signals and the mean-score integration gate.

Signal sources used by the pipeline:

* confidence: the extraction confidence, plus 0.5 when the triplet is
  schema-mapped (registered relation, both endpoints typed)
* clarity: the clarity score returned by the evaluator prompt
* relevance: the relevance score returned by the evaluator prompt, plus the
  relevance of the segment the triplet came from
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from ..gateway import Gateway
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload

_LOW = math.nextafter(0.0, 1.0)
_HIGH = math.nextafter(1.0, 0.0)

CONFLICT_STATUSES = ("Agree", "Contradict", "Ambiguous", None)


class EvaluationError(ValueError):
    pass


def sigmoid(x: float) -> float:
    """Logistic function, kept strictly inside (0, 1) even where floats saturate."""
    if x >= 0:
        y = 1.0 / (1.0 + math.exp(-x))
    else:
        z = math.exp(x)
        y = z / (1.0 + z)
    return min(max(y, _LOW), _HIGH)


@dataclass
class VerificationSignals:
    confidence: list[float] = field(default_factory=list)
    clarity: list[float] = field(default_factory=list)
    relevance: list[float] = field(default_factory=list)
    conflict_status: str | None = None

    def __post_init__(self):
        if self.conflict_status not in CONFLICT_STATUSES:
            raise ValueError(f"unknown conflict status {self.conflict_status!r}")


@dataclass(frozen=True)
class Evaluation:
    confidence: float
    clarity: float
    relevance: float
    integrated: bool
    evaluated: bool = True

    @property
    def mean(self) -> float:
        return (self.confidence + self.clarity + self.relevance) / 3

    def to_dict(self) -> dict:
        return {"C": self.confidence, "Cl": self.clarity, "R": self.relevance,
                "mean": self.mean, "integrated": self.integrated, "evaluated": self.evaluated}


SENTINEL = Evaluation(0.5, 0.5, 0.5, True, evaluated=False)


def _weighted(signals: Sequence[float], weights: Sequence[float], name: str) -> float:
    if len(weights) < len(signals):
        raise EvaluationError(f"{name}: {len(signals)} signals but only {len(weights)} weights")
    total = 0.0
    for s, w in zip(signals, weights):
        if not math.isfinite(s) or not math.isfinite(w):
            raise EvaluationError(f"{name}: non-finite signal or weight")
        total += w * s
    return sigmoid(total)


def evaluate(signals: VerificationSignals, alpha: Sequence[float], beta: Sequence[float],
             gamma: Sequence[float], theta: float) -> Evaluation:
    if not 0.0 <= theta <= 1.0:
        raise EvaluationError(f"threshold {theta} outside [0, 1]")
    c = _weighted(signals.confidence, alpha, "confidence")
    cl = _weighted(signals.clarity, beta, "clarity")
    r = _weighted(signals.relevance, gamma, "relevance")
    return Evaluation(c, cl, r, (c + cl + r) / 3 >= theta)


def _channel(gateway: Gateway, template: PromptTemplate, agent: str, triplet: dict,
             context: str, audit: AuditLog) -> float | None:
    payload = dumps_payload({"triplets": [triplet], "context": context})
    msg = ask(gateway, template, {"payload": payload}, audit, agent)
    if msg is None:
        return None
    return msg.lookup(triplet["head"], triplet["relation"], triplet["tail"])


def gather_signals(head: str, relation: str, tail: str, *, extraction_confidence: float,
                   schema_mapped: bool, segment_relevance: float, context: str,
                   gateway: Gateway, catalog: dict[str, PromptTemplate], audit: AuditLog,
                   conflict_status: str | None = None) -> VerificationSignals:
    """Ask the clarity and relevance evaluators about one triplet.

    A channel whose reply cannot be parsed contributes no signal.
    """
    triplet = {"head": head, "relation": relation, "tail": tail}
    clarity = _channel(gateway, catalog["EA_CLARITY"], "EA_CLARITY", triplet, context, audit)
    relevance = _channel(gateway, catalog["EA_RELEVANCE"], "EA_RELEVANCE", triplet, context, audit)
    return VerificationSignals(
        confidence=[extraction_confidence, 0.5 if schema_mapped else 0.0],
        clarity=[] if clarity is None else [clarity],
        relevance=([] if relevance is None else [relevance]) + [segment_relevance],
        conflict_status=conflict_status,
    )
