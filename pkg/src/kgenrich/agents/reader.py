"""Segmentation and relevance scoring."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from ..gateway import Gateway
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload
from .ingest import UNREADABLE, Document

logger = logging.getLogger(__name__)

MIN_SEGMENT_CHARS = 200
SHORT_SEGMENT_CHARS = 30


@dataclass
class Segment:
    doc_id: str
    seg_index: int
    text: str
    relevance: float

    def __post_init__(self):
        if not 0.0 <= self.relevance <= 1.0:
            raise ValueError(f"relevance {self.relevance} outside [0, 1]")


def split_segments(content: str, min_chars: int = MIN_SEGMENT_CHARS) -> list[str]:
    """Blank-line paragraphs, merged forward until each holds at least ``min_chars``."""
    segments: list[str] = []
    buf: list[str] = []
    for para in content.split("\n\n"):
        para = para.strip()
        if not para:
            continue
        buf.append(para)
        if len("\n\n".join(buf)) >= min_chars:
            segments.append("\n\n".join(buf))
            buf = []
    if buf:
        segments.append("\n\n".join(buf))
    return segments


def _is_short(text: str) -> bool:
    return len(text.replace(UNREADABLE, "").strip()) < SHORT_SEGMENT_CHARS


def score_segments(doc: Document, graph, gateway: Gateway, catalog: dict[str, PromptTemplate],
                   audit: AuditLog) -> list[Segment | None]:
    """Score every segment of ``doc``; None marks a segment skipped after a bad reply."""
    if doc.error:
        raise ValueError(f"document {doc.doc_id} is error-flagged")
    digest = json.dumps(graph.digest(), sort_keys=True)
    out: list[Segment | None] = []
    for idx, text in enumerate(split_segments(doc.content)):
        if _is_short(text):
            out.append(Segment(doc.doc_id, idx, text, 0.0))
            continue
        payload = dumps_payload({"segments": [{"text": text}]})
        msg = ask(gateway, catalog["RA"], {"kg_digest": digest, "payload": payload}, audit, "RA")
        if msg is None or not msg.segments:
            if msg is not None:
                audit.add("skip", "RA", f"segment {idx}: reply carried no segments")
            out.append(None)
            continue
        out.append(Segment(doc.doc_id, idx, text, msg.segments[0].score))
    return out


def read(doc: Document, graph, gateway: Gateway, delta: float, catalog: dict[str, PromptTemplate],
         audit: AuditLog) -> list[Segment]:
    return [s for s in score_segments(doc, graph, gateway, catalog, audit)
            if s is not None and s.relevance >= delta]
