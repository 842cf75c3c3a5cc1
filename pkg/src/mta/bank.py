"""Stage 1: cluster users, pick one anchor per cluster, train the anchor adapters.

The bank directory holds ``manifest.json`` plus one adapter directory per
anchor. Retrieval embeddings are written inline with fixed-width number
formatting, so the serialized size depends only on the bank shape and not on
the values or on how many users the bank was built from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapters import LoraModule, init_lora, load_adapter, save_adapter
from .backbone import BackboneModel, TrainingConfig, train_adapter
from .errors import MissingFileError, ParameterError, ShapeError, VersionMismatchError
from .evalcli.corpus import history_examples
from .numerics import SeededRng
from .profiling import Encoder, UserRecord, default_encoder, encoder_from_config, profile_embedding, retrieval_embedding

BANK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BankConfig:
    num_clusters: int = 8
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-10
    kmeans_restarts: int = 10
    anchor_rank: int = 4
    anchor_training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ParameterError("num_clusters must be >= 1")
        if self.kmeans_max_iters < 1 or self.kmeans_restarts < 1:
            raise ParameterError("kmeans_max_iters and kmeans_restarts must be >= 1")
        if self.anchor_training.rank != self.anchor_rank:
            raise ParameterError(
                f"anchor_rank {self.anchor_rank} disagrees with anchor_training.rank {self.anchor_training.rank}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["anchor_training"] = self.anchor_training.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BankConfig":
        d = dict(d)
        training = TrainingConfig.from_dict(d.pop("anchor_training", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(anchor_training=training, **{k: v for k, v in d.items() if k in names})


@dataclass
class Clustering:
    centroids: np.ndarray
    assignment: dict[str, int]
    sse_history: list[float] = field(default_factory=list)

    def members(self, v: int) -> list[str]:
        return sorted(uid for uid, c in self.assignment.items() if c == v)


def _sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: SeededRng) -> np.ndarray:
    n = x.shape[0]
    chosen = [rng.integer(n)]
    for _ in range(1, k):
        d2 = _sq_distances(x, x[chosen]).min(axis=1)
        if d2.sum() > 0:
            chosen.append(rng.choice(d2))
        else:
            chosen.append(next(i for i in range(n) if i not in chosen))
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    labels = np.argmin(_sq_distances(x, centroids), axis=1)
    k = centroids.shape[0]
    # empty clusters take the point farthest from its own centroid
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        d2 = np.sum((x - centroids[labels]) ** 2, axis=1)
        d2[counts[labels] < 2] = -1.0
        far = int(np.argmax(d2))
        labels[far] = j
        centroids[j] = x[far]
    return labels


def within_cluster_sse(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum((x - centroids[labels]) ** 2))


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float):
    sse_history = []
    for _ in range(max_iters):
        labels = _assign(x, centroids)
        updated = np.stack([x[labels == j].mean(axis=0) for j in range(centroids.shape[0])])
        sse_history.append(within_cluster_sse(x, labels, updated))
        shift = float(np.max(np.sqrt(np.sum((updated - centroids) ** 2, axis=1))))
        centroids = updated
        if shift < tol:
            break
    labels = _assign(x, centroids)
    return centroids, labels, sse_history


def kmeans(
    embeddings: Mapping[str, np.ndarray],
    num_clusters: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-10,
    restarts: int = 1,
) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds over users sorted by id.

    With ``restarts > 1`` the seeding is repeated from one seeded stream and
    the run with the lowest final SSE wins (earliest on ties).
    """
    ids = sorted(embeddings)
    if len(ids) < num_clusters:
        raise ParameterError(f"{len(ids)} users cannot fill {num_clusters} clusters")
    if restarts < 1:
        raise ParameterError("restarts must be >= 1")
    x = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    rng = SeededRng(seed)
    best = None
    for _ in range(restarts):
        centroids, labels, history = _lloyd(x, _kmeans_pp(x, num_clusters, rng), max_iters, tol)
        sse = within_cluster_sse(x, labels, centroids)
        if best is None or sse < best[0]:
            best = (sse, centroids, labels, history)
    _, centroids, labels, history = best
    return Clustering(centroids, {uid: int(c) for uid, c in zip(ids, labels)}, history)


def select_anchor(cluster_members: Sequence[UserRecord]) -> str:
    """Most active member; ties go to the smallest user id."""
    if not cluster_members:
        raise ParameterError("cannot select an anchor from an empty cluster")
    return min(cluster_members, key=lambda u: (-len(u.history), u.user_id)).user_id


def train_anchor(
    user: UserRecord,
    base: BackboneModel,
    cfg: TrainingConfig,
    rng: SeededRng,
    encoder: Encoder | None = None,
    loss_log: list | None = None,
) -> LoraModule:
    examples = history_examples(user, base.config.task, encoder)
    init = init_lora(base.config, cfg.rank, rng, label=user.user_id)
    trained = train_adapter(base.frozen_view(), None, init, examples, cfg, rng, loss_log)
    return trained.relabel(user.user_id)


@dataclass(frozen=True)
class BankEntry:
    anchor_id: str
    retrieval_embedding: np.ndarray
    adapter: LoraModule


@dataclass(frozen=True)
class LoraBank:
    entries: tuple[BankEntry, ...]
    config: BankConfig
    encoder: Encoder = field(default_factory=default_encoder, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.anchor_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ParameterError("bank anchor ids must be distinct")
        if self.entries:
            ref = self.entries[0].adapter
            for e in self.entries[1:]:
                if e.adapter.rank != ref.rank or [(a.shape, b.shape) for a, b in e.adapter.per_layer] != [
                    (a.shape, b.shape) for a, b in ref.per_layer
                ]:
                    raise ShapeError(f"bank adapter {e.anchor_id!r} differs in rank or shape")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def anchor_ids(self) -> list[str]:
        return [e.anchor_id for e in self.entries]

    def adapter(self, anchor_id: str) -> LoraModule:
        for e in self.entries:
            if e.anchor_id == anchor_id:
                return e.adapter
        raise KeyError(anchor_id)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.anchor_id.encode("utf-8"))
            h.update(np.ascontiguousarray(e.retrieval_embedding, dtype="<f8").tobytes())
            h.update(e.adapter.checksum().encode("ascii"))
        return h.hexdigest()


def build_bank(
    corpus: Sequence[UserRecord],
    base: BackboneModel,
    cfg: BankConfig,
    encoder: Encoder | None = None,
    loss_logs: dict | None = None,
) -> LoraBank:
    encoder = encoder or default_encoder()
    by_id = {u.user_id: u for u in corpus}
    if len(by_id) != len(corpus):
        raise ParameterError("corpus user ids must be unique")
    embeddings = {u.user_id: profile_embedding(u, encoder).vector for u in corpus}
    clustering = kmeans(
        embeddings, cfg.num_clusters, cfg.seed, cfg.kmeans_max_iters, cfg.kmeans_tol, cfg.kmeans_restarts
    )
    root_rng = SeededRng(cfg.seed)
    entries = []
    for v in range(cfg.num_clusters):
        anchor = by_id[select_anchor([by_id[uid] for uid in clustering.members(v)])]
        log = [] if loss_logs is not None else None
        adapter = train_anchor(anchor, base, cfg.anchor_training, root_rng.derive(anchor.user_id), encoder, log)
        if loss_logs is not None:
            loss_logs[anchor.user_id] = log
        entries.append(BankEntry(anchor.user_id, retrieval_embedding(anchor, encoder).vector, adapter))
    return LoraBank(tuple(entries), cfg, encoder)


def _fixed_width_array(values: np.ndarray) -> str:
    return "[" + ",".join(f"{float(x): .16e}" for x in values) + "]"


def save_bank(bank: LoraBank, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(bank.entries):
        rel = f"adapters/{i:03d}"
        save_adapter(e.adapter, root / rel)
        entries.append({"anchor_id": e.anchor_id, "embedding": f"@@EMB{i}@@", "adapter": f"{rel}/manifest.json"})
    manifest = {
        "format": "mta-bank",
        "version": BANK_FORMAT_VERSION,
        "V": len(bank.entries),
        "encoder": bank.encoder.config(),
        "config": bank.config.to_dict(),
        "entries": entries,
    }
    text = json.dumps(manifest, indent=2)
    for i, e in enumerate(bank.entries):
        text = text.replace(f'"@@EMB{i}@@"', _fixed_width_array(e.retrieval_embedding))
    (root / "manifest.json").write_text(text + "\n")


def load_bank(path: str | Path, encoder: Encoder | None = None) -> LoraBank:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise MissingFileError(f"missing bank manifest {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("format") != "mta-bank" or manifest.get("version") != BANK_FORMAT_VERSION:
        raise VersionMismatchError(
            f"bank format {manifest.get('format')!r} v{manifest.get('version')}, expected mta-bank v{BANK_FORMAT_VERSION}"
        )
    enc_cfg = manifest["encoder"]
    if encoder is None:
        encoder = encoder_from_config(enc_cfg)
    elif encoder.dim != enc_cfg.get("dim"):
        raise ParameterError(f"encoder dim {encoder.dim} does not match bank encoder dim {enc_cfg.get('dim')}")
    entries = []
    for e in manifest["entries"]:
        adapter_dir = (root / e["adapter"]).parent
        if not (root / e["adapter"]).is_file():
            raise MissingFileError(f"missing adapter manifest {e['adapter']}")
        entries.append(BankEntry(e["anchor_id"], np.asarray(e["embedding"], dtype=np.float64), load_adapter(adapter_dir)))
    if len(entries) != manifest["V"]:
        raise ParameterError("bank manifest V disagrees with its entry count")
    return LoraBank(tuple(entries), BankConfig.from_dict(manifest["config"]), encoder)
