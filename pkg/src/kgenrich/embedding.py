"""Mention/entity embeddings and nearest-entity normalization."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64
DEFAULT_RHO = 0.35


class EmbeddingError(ValueError):
    pass


class DimensionMismatch(EmbeddingError):
    """Dimension mismatch between a query and an index."""


@dataclass(frozen=True)
class NovelEntity:
    """Returned when no indexed entity lies within the novelty threshold."""

    distance: float | None = None


class EmbeddingProvider(Protocol):
    provider_id: str
    seed: int
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Seeded character n-gram hashing into ``dim`` buckets, L2-normalized.

    Counts are unsigned so any non-empty text yields a non-zero vector.
    """

    provider_id = "ngram-hash-v1"

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, n: int = 3, case_fold: bool = True):
        if dim <= 0:
            raise EmbeddingError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.n = n
        self.case_fold = case_fold
        self._key = seed.to_bytes(8, "little", signed=True)

    def _bucket(self, gram: str) -> int:
        h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(h.digest(), "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        text = " ".join(text.split())
        if not text:
            raise EmbeddingError("cannot embed empty text")
        if self.case_fold:
            text = text.casefold()
        padded = f"#{text}#"
        vec = np.zeros(self.dim, dtype=np.float64)
        for i in range(max(1, len(padded) - self.n + 1)):
            vec[self._bucket(padded[i:i + self.n])] += 1.0
        return vec / np.linalg.norm(vec)


class RemoteEmbedder:
    """Embeddings from an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, client, model: str, dim: int, seed: int = 0):
        self.client = client
        self.model = model
        self.dim = dim
        self.seed = seed
        self.provider_id = f"remote:{model}"

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        resp = self.client.post("/embeddings", json={"model": self.model, "input": text})
        resp.raise_for_status()
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DimensionMismatch(f"remote embedding has dim {vec.shape}, expected {self.dim}")
        return vec


def cosine_distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(query)
    return 1.0 - (matrix @ query) / norms


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(cosine_distances(np.asarray(a)[None, :], np.asarray(b))[0])


class EntityIndex:
    """Immutable snapshot of entity id -> vector, ids kept sorted for tie-breaking."""

    def __init__(self, entries: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = (), dim: int | None = None):
        items = dict(entries)
        self.ids: list[str] = sorted(items)
        if dim is None:
            dim = len(next(iter(items.values()))) if items else DEFAULT_DIM
        self.dim = dim
        if self.ids:
            rows = [np.asarray(items[i], dtype=np.float64).ravel() for i in self.ids]
            if any(len(r) != dim for r in rows):
                raise DimensionMismatch("all index entries must share one dimension")
            self.matrix = np.vstack(rows)
        else:
            self.matrix = np.zeros((0, dim))

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.ids

    def vector(self, entity_id: str) -> np.ndarray:
        return self.matrix[self.ids.index(entity_id)]

    def entries(self) -> dict[str, np.ndarray]:
        return {i: self.matrix[k] for k, i in enumerate(self.ids)}

    def with_entry(self, entity_id: str, vec: np.ndarray) -> "EntityIndex":
        items = self.entries()
        items[entity_id] = vec
        return EntityIndex(items, self.dim)

    @classmethod
    def from_graph(cls, graph, provider) -> "EntityIndex":
        # one vector per entity, from its primary surface form
        return cls(
            {eid: provider.embed(ent.primary_form) for eid, ent in graph.entities.items()},
            provider.dim,
        )


def nearest_entity(
    index: EntityIndex,
    mention_vec: np.ndarray,
    rho: float = DEFAULT_RHO,
    distance: Callable[[np.ndarray, np.ndarray], np.ndarray] = cosine_distances,
) -> tuple[str, float] | NovelEntity:
    """Closest indexed entity to ``mention_vec``, or NovelEntity if farther than ``rho``.

    Exact ties go to the lexicographically smallest id.
    """
    mention_vec = np.asarray(mention_vec, dtype=np.float64)
    if mention_vec.shape != (index.dim,):
        raise DimensionMismatch(f"query dim {mention_vec.shape} != index dim {index.dim}")
    if len(index) == 0:
        return NovelEntity()
    dists = distance(index.matrix, mention_vec)
    best = int(np.argmin(dists))  # first minimum == smallest id, ids are sorted
    d = float(dists[best])
    if d > rho:
        return NovelEntity(d)
    return index.ids[best], d


# -- on-disk cache ---------------------------------------------------------

_MAGIC = b"KGEI"
_VERSION = 1


def save_index(index: EntityIndex, path: str | Path, provider_id: str, seed: int) -> None:
    pid = provider_id.encode("utf-8")
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IIqI", _VERSION, index.dim, seed, len(pid)) + pid
    out += struct.pack("<I", len(index))
    for k, eid in enumerate(index.ids):
        raw = eid.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += index.matrix[k].astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_index(path: str | Path, provider_id: str, seed: int) -> EntityIndex | None:
    """Load a cached index; None when missing, stale (provider/seed changed) or corrupt."""
    p = Path(path)
    if not p.exists():
        return None
    data = p.read_bytes()
    try:
        if data[:4] != _MAGIC:
            return None
        off = 4
        version, dim, cached_seed, plen = struct.unpack_from("<IIqI", data, off)
        off += struct.calcsize("<IIqI")
        cached_pid = data[off:off + plen].decode("utf-8")
        off += plen
        if version != _VERSION or cached_pid != provider_id or cached_seed != seed:
            logger.info("embedding cache %s invalidated", p)
            return None
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        entries = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            eid = data[off:off + n].decode("utf-8")
            off += n
            entries[eid] = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
            off += 4 * dim
        return EntityIndex(entries, dim)
    except (struct.error, UnicodeDecodeError, ValueError):
        logger.warning("embedding cache %s unreadable", p)
        return None
