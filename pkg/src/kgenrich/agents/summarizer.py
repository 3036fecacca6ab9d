"""Segment summarization with a hard word budget."""

from __future__ import annotations

from dataclasses import dataclass

from ..gateway import Gateway
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload
from .reader import Segment

OMITTED = "[OMITTED]"
MAX_WORDS = 100


@dataclass
class Summary:
    doc_id: str
    seg_index: int
    original_text: str
    summary: str
    score: float

    @property
    def omitted(self) -> bool:
        return self.summary == OMITTED


def clamp_words(text: str, limit: int) -> tuple[str, bool]:
    words = text.split()
    if len(words) <= limit:
        return text, False
    return " ".join(words[:limit]), True


def passthrough(seg: Segment) -> Summary:
    """Raw segment text used as its own summary (summarizer disabled)."""
    return Summary(seg.doc_id, seg.seg_index, seg.text, seg.text, seg.relevance)


def summarize(seg: Segment, gateway: Gateway, skip_threshold: float,
              catalog: dict[str, PromptTemplate], audit: AuditLog,
              max_words: int = MAX_WORDS) -> Summary:
    if seg.relevance < skip_threshold:
        return Summary(seg.doc_id, seg.seg_index, seg.text, OMITTED, seg.relevance)
    payload = dumps_payload({"segments": [{"text": seg.text, "score": seg.relevance}]})
    msg = ask(gateway, catalog["SA"], {"max_words": str(max_words), "payload": payload}, audit, "SA")
    if msg is None or not msg.summaries:
        audit.add("fallback", "SA", f"segment {seg.seg_index}: using original text as summary")
        text = seg.text
    else:
        text = msg.summaries[0].summary
    if text.strip() == OMITTED:
        return Summary(seg.doc_id, seg.seg_index, seg.text, OMITTED, seg.relevance)
    text, cut = clamp_words(text, max_words)
    if cut:
        audit.add("truncated", "SA", f"segment {seg.seg_index}: summary cut to {max_words} words")
    return Summary(seg.doc_id, seg.seg_index, seg.text, text, seg.relevance)
