"""Stage functions, one per agent role."""

from .conflict import ConflictDecision, choose_action, resolve_conflict
from .entities import (
    DictionaryEntry,
    EntityDictionary,
    NormalizedMention,
    NovelEntityRegistry,
    extract_entities,
)
from .evaluator import (
    SENTINEL,
    Evaluation,
    EvaluationError,
    VerificationSignals,
    evaluate,
    gather_signals,
    sigmoid,
)
from .ingest import Document, ingest, transliterate
from .reader import Segment, read, score_segments, split_segments
from .relations import CandidateTriplet, extract_relations
from .schema import AlignmentResult, align_schema, pick_type
from .summarizer import OMITTED, Summary, passthrough, summarize

__all__ = [
    "AlignmentResult", "CandidateTriplet", "ConflictDecision", "DictionaryEntry", "Document",
    "EntityDictionary", "Evaluation", "EvaluationError", "NormalizedMention", "NovelEntityRegistry",
    "OMITTED", "SENTINEL", "Segment", "Summary", "VerificationSignals", "align_schema", "choose_action",
    "evaluate", "extract_entities", "extract_relations", "gather_signals", "ingest", "passthrough",
    "pick_type", "read", "resolve_conflict", "score_segments", "sigmoid", "split_segments",
    "summarize", "transliterate",
]
