"""Document ingestion: metadata defaults, whitespace cleanup, ASCII transliteration."""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass, field

from ..gateway import Gateway
from ..protocol import AuditLog, PromptTemplate, ask, dumps_payload

logger = logging.getLogger(__name__)

METADATA_KEYS = ("title", "authors", "journal", "pub_date", "doi", "pmid")
UNREADABLE = "[UNREADABLE]"

_GREEK = dict(zip(
    "αβγδεζηθικλμνξπρσςτυφχψω",
    ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa",
     "lambda", "mu", "nu", "xi", "pi", "rho", "sigma", "varsigma", "tau", "upsilon", "phi",
     "chi", "psi", "omega"],
))
_GREEK_UPPER = dict(zip("ΓΔΘΛΞΠΣΥΦΨΩ", ["Gamma", "Delta", "Theta", "Lambda", "Xi", "Pi", "Sigma",
                                         "Upsilon", "Phi", "Psi", "Omega"]))

TRANSLITERATION = {
    **{k: "\\" + v for k, v in _GREEK.items()},
    **{k: "\\" + v for k, v in _GREEK_UPPER.items()},
    "µ": "\\mu",  # micro sign
    "±": "+/-", "×": "x", "÷": "/", "≤": "<=", "≥": ">=", "≠": "!=", "≈": "~",
    "→": "->", "←": "<-", "↑": "^", "↓": "v", "°": "deg", "·": ".", "•": "*", "…": "...",
    "\u2013": "-", "\u2014": "-", "‐": "-", "‑": "-", "−": "-",
    "‘": "'", "’": "'", "“": '"', "”": '"', " ": " ", " ": " ",
    "²": "^2", "³": "^3", "¹": "^1", "ß": "ss", "æ": "ae", "Æ": "AE", "ø": "o", "Ø": "O",
}


@dataclass
class Document:
    doc_id: str
    metadata: dict
    content: str
    error: bool = False
    error_reason: str = ""
    metadata_extra: dict = field(default_factory=dict)


def transliterate(text: str) -> str:
    out = []
    for ch in text:
        if ord(ch) < 128:
            out.append(ch)
        elif ch in TRANSLITERATION:
            out.append(TRANSLITERATION[ch])
        else:
            base = "".join(c for c in unicodedata.normalize("NFKD", ch) if not unicodedata.combining(c))
            out.append(base if base and base.isascii() else "?")
    return "".join(out)


def normalize_whitespace(text: str) -> str:
    """Collapse runs of spaces inside lines; keep blank lines between paragraphs."""
    paragraphs = re.split(r"\n\s*\n", text.replace("\r\n", "\n").replace("\r", "\n"))
    cleaned = [" ".join(p.split()) for p in paragraphs]
    return "\n\n".join(p for p in cleaned if p)


def normalize_metadata(hints: dict | None) -> dict:
    hints = hints or {}
    meta = {}
    for key in METADATA_KEYS:
        value = hints.get(key)
        if value is None or value == "" or value == []:
            meta[key] = "N/A"
        elif isinstance(value, str):
            meta[key] = transliterate(value)
        elif isinstance(value, list):
            meta[key] = [transliterate(str(v)) for v in value]
        else:
            meta[key] = value
    return meta


def ingest(raw: dict, gateway: Gateway | None = None, catalog: dict[str, PromptTemplate] | None = None,
           audit: AuditLog | None = None, use_llm: bool = False) -> Document:
    doc_id = str(raw["doc_id"])
    audit = audit if audit is not None else AuditLog(doc_id)
    hints = raw.get("metadata") or {}
    text = raw.get("text")
    if raw.get("error") or not isinstance(text, str) or not text.strip():
        reason = str(raw.get("error") or "empty text")
        audit.add("ingest_error", "IA", reason)
        return Document(doc_id, normalize_metadata(hints), "", True, reason)

    if use_llm and gateway is not None and catalog is not None:
        payload = dumps_payload({"metadata": hints, "text": text})
        msg = ask(gateway, catalog["IA"], {"payload": payload}, audit, "IA")
        if msg is not None:
            if msg.error:
                audit.add("ingest_error", "IA", "model flagged document as unusable")
                return Document(doc_id, normalize_metadata(hints), "", True, "flagged by model")
            merged = {**{k: v for k, v in msg.metadata.items() if v not in (None, "", "N/A")},
                      **{k: v for k, v in hints.items() if v not in (None, "", [])}}
            hints = merged
            text = msg.content or text

    content = normalize_whitespace(transliterate(text))
    if not content:
        audit.add("ingest_error", "IA", "no text after normalization")
        return Document(doc_id, normalize_metadata(hints), "", True, "empty text")
    extra = {k: v for k, v in hints.items() if k not in METADATA_KEYS}
    return Document(doc_id, normalize_metadata(hints), content, metadata_extra=extra)
