"""Planted-cluster synthetic user populations.

Each cluster owns a block of ``topic_words`` vocabulary words and a random
label mapping (one score per class and word). A user perturbs both with
Gaussian noise of scale ``user_noise``: tokens are drawn from
``softmax(cluster_logits + noise)`` where the cluster's topic words sit at
logit ``cluster_separation``, and an item's label is the argmax over classes
of the summed per-token scores under the user's own mapping. Shared
structure makes clusters recoverable; the per-user noise is the residual
preference only the user's own data reveals.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError
from ..numerics import SeededRng
from ..profiling import HistoryItem, Query, UserRecord


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 3
    users_per_cluster: int = 4
    history_len: tuple[int, int] = (16, 32)
    query_count: int = 12
    feature_dim: int = 48
    cluster_separation: float = 4.0
    user_noise: float = 0.5
    seed: int = 0
    test_users_per_cluster: int = 2
    few_shot: int = 8
    num_classes: int = 4
    tokens_per_item: int = 6
    topic_words: int = 8
    task: str = "classification"

    def __post_init__(self):
        object.__setattr__(self, "history_len", tuple(int(v) for v in self.history_len))
        counts = (
            self.n_clusters,
            self.users_per_cluster,
            self.query_count,
            self.feature_dim,
            self.few_shot,
            self.num_classes,
            self.tokens_per_item,
            self.topic_words,
        )
        if min(counts) < 1 or self.test_users_per_cluster < 0:
            raise ParameterError("synthetic counts must be >= 1")
        lo, hi = self.history_len
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad history_len range {self.history_len}")
        if not self.cluster_separation > 0 or self.user_noise < 0:
            raise ParameterError("cluster_separation must be > 0 and user_noise >= 0")
        if self.n_clusters * self.topic_words > self.feature_dim:
            raise ParameterError("topic word blocks do not fit in the vocabulary")
        if self.task not in ("classification", "rating"):
            raise ParameterError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["history_len"] = list(self.history_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SyntheticUser:
    user_id: str
    cluster: int
    is_test: bool
    vocab_logits: np.ndarray
    label_weights: np.ndarray


def word(j: int) -> str:
    return f"w{j:03d}"


def bank_user_id(cluster: int, i: int) -> str:
    return f"c{cluster}-u{i:04d}"


def heldout_user_id(cluster: int, i: int) -> str:
    return f"c{cluster}-t{i:04d}"


def planted_cluster(user_id: str) -> int:
    return int(user_id.split("-", 1)[0][1:])


def is_heldout_id(user_id: str) -> bool:
    return user_id.split("-", 1)[1].startswith("t")


def sample_population(spec: SyntheticSpec) -> list[SyntheticUser]:
    rng = SeededRng(spec.seed)
    v, c = spec.feature_dim, spec.num_classes
    rows = 1 if spec.task == "rating" else c
    users = []
    for k in range(spec.n_clusters):
        proto_vocab = np.zeros(v)
        proto_vocab[k * spec.topic_words : (k + 1) * spec.topic_words] = spec.cluster_separation
        proto_labels = rng.normal(rows * v).reshape(rows, v)
        members = [(bank_user_id(k, i), False) for i in range(spec.users_per_cluster)]
        members += [(heldout_user_id(k, i), True) for i in range(spec.test_users_per_cluster)]
        for uid, is_test in members:
            vocab = proto_vocab + spec.user_noise * rng.normal(v)
            labels = proto_labels + spec.user_noise * rng.normal(rows * v).reshape(rows, v)
            users.append(SyntheticUser(uid, k, is_test, vocab, labels))
    return users


def _label(spec: SyntheticSpec, user: SyntheticUser, counts: np.ndarray):
    scores = user.label_weights @ counts
    if spec.task == "classification":
        return int(np.argmax(scores))
    rating = 3.0 + 1.5 * float(scores[0]) / np.sqrt(spec.tokens_per_item)
    return float(min(5.0, max(1.0, round(rating))))


def _sample_item(spec: SyntheticSpec, user: SyntheticUser, rng: SeededRng) -> tuple[str, object]:
    p = np.exp(user.vocab_logits - user.vocab_logits.max())
    tokens = [rng.choice(p) for _ in range(spec.tokens_per_item)]
    counts = np.bincount(tokens, minlength=spec.feature_dim).astype(np.float64)
    return " ".join(word(t) for t in tokens), _label(spec, user, counts)


def generate_corpus(spec: SyntheticSpec) -> list[UserRecord]:
    """Bank users (``cK-uNNNN``) followed by few-shot test users (``cK-tNNNN``)."""
    rng = SeededRng(spec.seed).derive("items")
    lo, hi = spec.history_len
    records = []
    for user in sample_population(spec):
        n_hist = spec.few_shot if user.is_test else lo + rng.integer(hi - lo + 1)
        history = tuple(HistoryItem(*_sample_item(spec, user, rng)) for _ in range(n_hist))
        queries = []
        for _ in range(spec.query_count):
            text, target = _sample_item(spec, user, rng)
            queries.append(Query(target, text=text))
        records.append(UserRecord(user.user_id, history, tuple(queries)))
    bank_users = [r for r in records if not is_heldout_id(r.user_id)]
    test_users = [r for r in records if is_heldout_id(r.user_id)]
    return bank_users + test_users


def held_out_ids(corpus) -> list[str]:
    return [u.user_id for u in corpus if is_heldout_id(u.user_id)]
