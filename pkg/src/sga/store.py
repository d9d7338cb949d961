"""Experience store: embedded SGA atoms ranked by a hybrid symbolic-semantic score.

score = (1 - beta) * cos(q, e) + beta * |available & required| / (|required| + eps)

The symbolic term rewards atoms whose prerequisite slots are already known,
so an executable hint outranks a semantically closer one that cannot be
grounded yet.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .extraction import STORE_VERSION, SgaAtom
from .llm.backends import BackendError, RemoteBackend

log = logging.getLogger(__name__)


class StoreError(RuntimeError):
    pass


class DuplicateId(StoreError):
    pass


class EmptyStore(StoreError):
    pass


class DimensionMismatch(StoreError, ValueError):
    pass


class SchemaVersionMismatch(StoreError):
    pass


class ProviderError(BackendError):
    """The embedding provider failed or returned an unusable vector."""


@dataclass(frozen=True)
class StoreConfig:
    beta: float = 0.3
    epsilon: float = 1e-5
    top_k: int = 3
    embedding_dim: int = 256

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.top_k < 1 or self.embedding_dim < 1:
            raise ValueError("top_k and embedding_dim must be positive")

    def to_dict(self) -> dict:
        return {"beta": self.beta, "epsilon": self.epsilon, "top_k": self.top_k, "embedding_dim": self.embedding_dim}


@dataclass(frozen=True)
class RetrievalQuery:
    query_text: str
    query_vector: np.ndarray
    available_slots: frozenset[str]

    @classmethod
    def build(cls, text: str, embedder: "Embedder", slots: Iterable[str]) -> "RetrievalQuery":
        return cls(text, embedder.embed(text), frozenset(slots))


# ---------------------------------------------------------------------------
# Embedders


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Feature hashing of character n-grams and words into a nonnegative unit vector.

    Counts are never signed, so every cosine between two embeddings lies
    in [0, 1]. The hash is keyed by ``seed``.
    """

    def __init__(self, dim: int = 256, ngram: tuple[int, int] = (3, 4), seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.ngram = ngram
        self._key = seed.to_bytes(8, "little", signed=True)

    def features(self, text: str) -> list[str]:
        t = " ".join(text.lower().split())
        padded = f" {t} "
        feats = [f"w:{w}" for w in t.split()]
        lo, hi = self.ngram
        for n in range(lo, hi + 1):
            feats.extend(f"c:{padded[i:i + n]}" for i in range(len(padded) - n + 1))
        return feats

    def _bucket(self, feature: str) -> int:
        h = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=self._key)
        return int.from_bytes(h.digest(), "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ProviderError("cannot embed empty text")
        v = np.zeros(self.dim)
        for f in self.features(text):
            v[self._bucket(f)] += 1.0
        return v / np.linalg.norm(v)


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint; vectors are re-normalized to unit length."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None, dim: int | None = None, **kw):
        self._http = RemoteBackend(base_url, model, api_key, **kw)
        self.model = model
        self.dim = dim or 0

    @classmethod
    def from_env(cls, **kw) -> "RemoteEmbedder":
        try:
            base = os.environ["SGA_API_BASE"]
            model = os.environ["SGA_EMBED_MODEL"]
        except KeyError as exc:
            raise ProviderError(f"missing environment variable {exc.args[0]}") from None
        return cls(base, model, os.environ.get("SGA_API_KEY"), **kw)

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ProviderError("cannot embed empty text")
        data = self._http.post("/embeddings", {"model": self.model, "input": text})
        try:
            v = np.asarray(data["data"][0]["embedding"], dtype=float)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}") from None
        if self.dim and v.shape != (self.dim,):
            raise ProviderError(f"expected dimension {self.dim}, got {v.shape}")
        norm = np.linalg.norm(v)
        if not math.isfinite(norm) or norm == 0:
            raise ProviderError("embedding has zero or non-finite norm")
        self.dim = v.shape[0]
        return v / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def embed_atoms(atoms: Iterable[SgaAtom], embedder: Embedder) -> list[SgaAtom]:
    """Attach embeddings of ``state_description || goal`` to atoms that lack one."""
    return [
        a if a.embedding is not None else replace(a, embedding=tuple(float(x) for x in embedder.embed(a.embedding_text)))
        for a in atoms
    ]


# ---------------------------------------------------------------------------
# Scoring


def symbolic_score(available: frozenset[str] | set[str], required: frozenset[str] | set[str], epsilon: float) -> float:
    return len(set(available) & set(required)) / (len(required) + epsilon)


def hybrid_score(q: RetrievalQuery, atom: SgaAtom, cfg: StoreConfig = StoreConfig()) -> float:
    if atom.embedding is None:
        raise ValueError(f"atom {atom.sga_id} has no embedding")
    e = np.asarray(atom.embedding, dtype=float)
    if e.shape != q.query_vector.shape:
        raise DimensionMismatch(f"query dim {q.query_vector.shape} vs atom dim {e.shape}")
    sem = cosine(q.query_vector, e)
    return (1.0 - cfg.beta) * sem + cfg.beta * symbolic_score(q.available_slots, atom.required_slots, cfg.epsilon)


class ExperienceStore:
    """Exact exhaustive index over atoms.

    Atoms are kept sorted by id, so scores and rankings do not depend on
    insertion order. Reads take a snapshot; ``add`` and ``load`` hold the
    write lock.
    """

    def __init__(self, atoms: Iterable[SgaAtom] = (), cfg: StoreConfig = StoreConfig()):
        self.cfg = cfg
        self._atoms: dict[str, SgaAtom] = {}
        self._lock = threading.RLock()
        self._matrix: tuple[list[SgaAtom], np.ndarray, np.ndarray] | None = None
        for a in atoms:
            self.add(a)

    def __len__(self) -> int:
        return len(self._atoms)

    def __iter__(self):
        return iter(self.atoms)

    @property
    def atoms(self) -> list[SgaAtom]:
        return [self._atoms[k] for k in sorted(self._atoms)]

    @property
    def dim(self) -> int | None:
        for a in self._atoms.values():
            return len(a.embedding) if a.embedding is not None else None
        return None

    def add(self, atom: SgaAtom) -> None:
        if atom.embedding is None:
            raise ValueError(f"atom {atom.sga_id} must be embedded before it is added")
        with self._lock:
            if atom.sga_id in self._atoms:
                raise DuplicateId(atom.sga_id)
            dim = self.dim
            if dim is not None and len(atom.embedding) != dim:
                raise DimensionMismatch(f"atom {atom.sga_id} has dim {len(atom.embedding)}, store has {dim}")
            self._atoms[atom.sga_id] = atom
            self._matrix = None

    def _snapshot(self) -> tuple[list[SgaAtom], np.ndarray, np.ndarray]:
        with self._lock:
            if self._matrix is None:
                atoms = self.atoms
                emb = np.array([a.embedding for a in atoms], dtype=float)
                norms = np.linalg.norm(emb, axis=1)
                self._matrix = (atoms, emb, norms)
            return self._matrix

    def scores(self, q: RetrievalQuery, beta: float | None = None) -> list[tuple[SgaAtom, float]]:
        cfg = self.cfg if beta is None else replace(self.cfg, beta=beta)
        if not self._atoms:
            raise EmptyStore("the experience store is empty")
        atoms, emb, norms = self._snapshot()
        qv = np.asarray(q.query_vector, dtype=float)
        if qv.shape != (emb.shape[1],):
            raise DimensionMismatch(f"query dim {qv.shape} vs store dim {emb.shape[1]}")
        qn = float(np.linalg.norm(qv))
        dots = emb @ qv
        out = []
        for atom, dot, n in zip(atoms, dots, norms):
            sem = 0.0 if qn == 0 or n == 0 else float(dot) / (qn * float(n))
            sym = symbolic_score(q.available_slots, atom.required_slots, cfg.epsilon)
            out.append((atom, (1.0 - cfg.beta) * sem + cfg.beta * sym))
        return out

    def retrieve(self, q: RetrievalQuery, k: int | None = None, beta: float | None = None) -> list[tuple[SgaAtom, float]]:
        """Top-``k`` atoms by hybrid score, descending; ties go to the lower ``sga_id``."""
        k = self.cfg.top_k if k is None else k
        if k < 1:
            raise ValueError("k must be positive")
        ranked = sorted(self.scores(q, beta), key=lambda t: (-t[1], t[0].sga_id))
        return ranked[:k]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lines = [json.dumps(a.to_dict(), sort_keys=True, ensure_ascii=False) for a in self.atoms]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, cfg: StoreConfig = StoreConfig()) -> "ExperienceStore":
        store = cls(cfg=cfg)
        with store._lock:
            for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
                if row.get("v") != STORE_VERSION:
                    raise SchemaVersionMismatch(f"{path}:{lineno}: expected v={STORE_VERSION}, got {row.get('v')!r}")
                try:
                    store.add(SgaAtom.from_dict(row))
                except (KeyError, TypeError, ValueError) as exc:
                    if isinstance(exc, StoreError):
                        raise
                    raise StoreError(f"{path}:{lineno}: bad atom: {exc}") from None
        return store


def build_store(atoms: Sequence[SgaAtom], embedder: Embedder, cfg: StoreConfig = StoreConfig()) -> ExperienceStore:
    return ExperienceStore(embed_atoms(atoms, embedder), cfg)
