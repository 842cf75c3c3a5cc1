"""User records, text encoders, and the two profile embeddings.

Clustering uses the mean of per-item encodings; retrieval encodes the whole
history joined with newlines. Any object with ``dim``, ``encode(text)`` and
``config()`` can stand in for :class:`HashingEncoder`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .errors import DegenerateVectorError, ParameterError

DEFAULT_DIM = 256


class Encoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...

    def config(self) -> dict: ...


class HashingEncoder:
    """Signed feature hashing of lowercase whitespace word n-grams, L2-normalized.

    Buckets come from scikit-learn's MurmurHash3 ``HashingVectorizer``, which
    is seed-fixed and platform independent.
    """

    def __init__(self, dim: int = DEFAULT_DIM, ngram_max: int = 2):
        if dim < 1 or ngram_max < 1:
            raise ParameterError("dim and ngram_max must be >= 1")
        self.dim = dim
        self.ngram_max = ngram_max
        self._vectorizer = HashingVectorizer(
            n_features=dim,
            tokenizer=str.split,
            token_pattern=None,
            lowercase=True,
            ngram_range=(1, ngram_max),
            alternate_sign=True,
            norm=None,
        )
        self._cache: dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"HashingEncoder(dim={self.dim}, ngram_max={self.ngram_max})"

    def config(self) -> dict:
        return {"kind": "hashing", "dim": self.dim, "ngram_max": self.ngram_max}

    def encode(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ParameterError("cannot encode empty text")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        v = self._vectorizer.transform([text]).toarray()[0].astype(np.float64)
        norm = math.sqrt(float(v @ v))
        if norm == 0.0:
            raise ParameterError(f"hashed features of {text[:40]!r} cancel to zero")
        v = v / norm
        v.setflags(write=False)
        self._cache[text] = v
        return v


def encoder_from_config(cfg: dict) -> Encoder:
    if cfg.get("kind") != "hashing":
        raise ParameterError(f"cannot rebuild encoder of kind {cfg.get('kind')!r}; pass it explicitly")
    return HashingEncoder(int(cfg["dim"]), int(cfg.get("ngram_max", 2)))


_default_encoder: HashingEncoder | None = None


def default_encoder() -> HashingEncoder:
    global _default_encoder
    if _default_encoder is None:
        _default_encoder = HashingEncoder()
    return _default_encoder


def encode_text(text: str, encoder: Encoder | None = None) -> np.ndarray:
    return (encoder or default_encoder()).encode(text)


@dataclass(frozen=True)
class HistoryItem:
    text: str
    target: object = None

    def __post_init__(self):
        if not self.text:
            raise ParameterError("history item text must be non-empty")


@dataclass(frozen=True)
class Query:
    target: object
    text: str | None = None
    features: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.text is None) == (self.features is None):
            raise ParameterError("a query carries exactly one of text or features")


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    history: tuple[HistoryItem, ...]
    queries: tuple[Query, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        object.__setattr__(self, "queries", tuple(self.queries))


@dataclass(frozen=True)
class ProfileEmbedding:
    vector: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in ("clustering", "retrieval"):
            raise ParameterError(f"unknown embedding kind {self.kind!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ParameterError("embedding has non-finite entries")


def _require_history(user: UserRecord) -> None:
    if not user.history:
        raise ParameterError(f"user {user.user_id!r} has an empty history")


def profile_embedding(user: UserRecord, encoder: Encoder | None = None) -> ProfileEmbedding:
    """Plain mean of the per-item encodings (not re-normalized)."""
    _require_history(user)
    total = np.zeros((encoder or default_encoder()).dim)
    for item in user.history:
        total = total + encode_text(item.text, encoder)
    return ProfileEmbedding(total / len(user.history), "clustering")


def retrieval_text(user: UserRecord) -> str:
    return "\n".join(item.text for item in user.history)


def retrieval_embedding(user: UserRecord, encoder: Encoder | None = None) -> ProfileEmbedding:
    _require_history(user)
    return ProfileEmbedding(encode_text(retrieval_text(user), encoder), "retrieval")


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))
