"""Stages 2 and 3 for one target user: retrieve, merge, freeze, stack, predict."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import (
    DEFAULT_SIM_FLOOR,
    MERGE_MODES,
    LoraModule,
    MergeSpec,
    init_lora,
    load_adapter,
    materialize,
    merge,
    merge_coefficients,
    merge_pair,
    save_adapter,
)
from .backbone import RATING_RANGE, BackboneModel, Example, TrainingConfig, forward, load_model, save_model, train_adapter
from .bank import LoraBank
from .errors import ContaminationError, MissingFileError, ParameterError, StateError
from .evalcli.corpus import history_examples
from .numerics import SeededRng
from .profiling import Encoder, UserRecord, cosine_similarity, retrieval_embedding

__all__ = [
    "PersonalizationConfig",
    "PersonalizedModel",
    "adapt_only",
    "adaptive_merge",
    "merge_coefficients",
    "personalize_user",
    "predict",
    "retrieve_top_k",
    "user_rng",
]


@dataclass(frozen=True)
class PersonalizationConfig:
    """``fixed_alpha`` replaces the similarity-derived pair with (alpha, 1 - alpha); sweeps only."""

    top_k: int = 2
    stacked: TrainingConfig = field(default_factory=TrainingConfig)
    merge_mode: str = "factor"
    sim_floor: float = DEFAULT_SIM_FLOOR
    fixed_alpha: float | None = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ParameterError("top_k must be >= 1")
        if self.merge_mode not in MERGE_MODES:
            raise ParameterError(f"unknown merge mode {self.merge_mode!r}")
        if self.fixed_alpha is not None:
            if not 0.0 <= self.fixed_alpha <= 1.0:
                raise ParameterError(f"fixed alpha {self.fixed_alpha} outside [0, 1]")
            if self.top_k != 2:
                raise ParameterError("a fixed alpha pair needs top_k == 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stacked"] = self.stacked.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PersonalizationConfig":
        d = dict(d)
        stacked = TrainingConfig.from_dict(d.pop("stacked", {}))
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(stacked=stacked, **{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class PersonalizedModel:
    frozen_base: BackboneModel
    stacked: LoraModule
    merge_spec: MergeSpec | None
    user_id: str

    def __post_init__(self):
        if not self.frozen_base.frozen:
            raise StateError("a personalized model needs a frozen base")


def user_rng(seed: int, user_id: str) -> SeededRng:
    return SeededRng(seed).derive(user_id)


def retrieve_top_k(bank: LoraBank, user: UserRecord, k: int, encoder: Encoder | None = None) -> list[tuple[str, float]]:
    if not 1 <= k <= len(bank):
        raise ParameterError(f"top_k={k} but the bank holds {len(bank)} anchors")
    query = retrieval_embedding(user, encoder or bank.encoder).vector
    scored = [(e.anchor_id, cosine_similarity(query, e.retrieval_embedding)) for e in bank.entries]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def adaptive_merge(
    bank: LoraBank, user: UserRecord, config: PersonalizationConfig, encoder: Encoder | None = None
) -> tuple[LoraModule, MergeSpec]:
    if len(bank) == 0:
        raise ParameterError("the bank is empty")
    ranked = retrieve_top_k(bank, user, config.top_k, encoder)
    ids = tuple(a for a, _ in ranked)
    sims = tuple(s for _, s in ranked)
    if config.fixed_alpha is not None:
        spec = MergeSpec(ids, sims, (config.fixed_alpha, 1.0 - config.fixed_alpha))
    else:
        spec = MergeSpec(ids, sims, merge_coefficients(sims, config.sim_floor))
    modules = [bank.adapter(a) for a in ids]
    if len(ids) == 2 and config.merge_mode == "factor":
        merged = merge_pair(modules[0], modules[1], spec)
    else:
        merged = merge(modules, spec, config.merge_mode)
    return merged, spec


def _few_shot(user: UserRecord, base: BackboneModel, encoder) -> list[Example]:
    if not user.history:
        raise ParameterError(f"user {user.user_id!r} has no few-shot data")
    return history_examples(user, base.config.task, encoder)


def personalize_user(
    bank: LoraBank,
    base: BackboneModel,
    user: UserRecord,
    config: PersonalizationConfig,
    rng: SeededRng,
    encoder: Encoder | None = None,
    loss_log: list | None = None,
) -> PersonalizedModel:
    """Merge the retrieved anchors into the base, freeze it, train the stacked adapter."""
    if user.user_id in bank.anchor_ids:
        raise ContaminationError(f"user {user.user_id!r} is a bank anchor and cannot be a target user")
    encoder = encoder or bank.encoder
    data = _few_shot(user, base, encoder)
    merged, spec = adaptive_merge(bank, user, config, encoder)
    frozen = materialize(base, merged)
    before = frozen.checksum()
    init = init_lora(base.config, config.stacked.rank, rng, label="stacked")
    stacked = train_adapter(frozen, None, init, data, config.stacked, rng, loss_log)
    if frozen.checksum() != before:
        raise StateError("materialized base changed during stacked training")
    return PersonalizedModel(frozen, stacked.relabel("stacked"), spec, user.user_id)


def adapt_only(
    base: BackboneModel,
    user: UserRecord,
    config: PersonalizationConfig,
    rng: SeededRng,
    encoder: Encoder | None = None,
) -> PersonalizedModel:
    """Ablation: a fresh stacked adapter on the raw base, no merge."""
    data = _few_shot(user, base, encoder)
    frozen = base.frozen_view()
    init = init_lora(base.config, config.stacked.rank, rng, label="stacked")
    stacked = train_adapter(frozen, None, init, data, config.stacked, rng)
    return PersonalizedModel(frozen, stacked.relabel("stacked"), None, user.user_id)


def predict(pm: PersonalizedModel, query: Example):
    out = forward(pm.frozen_base, [pm.stacked], query.features)
    if pm.frozen_base.config.task == "classification":
        return int(np.argmax(out))
    lo, hi = RATING_RANGE
    return float(min(max(float(out[0]), lo), hi))


def save_personalized(pm: PersonalizedModel, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"user_id": pm.user_id, "merge_spec": pm.merge_spec.to_dict() if pm.merge_spec else None}
    (root / "merge_spec.json").write_text(json.dumps(meta, indent=2) + "\n")
    save_model(pm.frozen_base, root / "model")
    save_adapter(pm.stacked, root / "stacked")


def load_personalized(path: str | Path) -> PersonalizedModel:
    root = Path(path)
    if not (root / "merge_spec.json").is_file():
        raise MissingFileError(f"missing merge_spec.json in {root}")
    meta = json.loads((root / "merge_spec.json").read_text())
    spec = MergeSpec.from_dict(meta["merge_spec"]) if meta["merge_spec"] else None
    return PersonalizedModel(load_model(root / "model"), load_adapter(root / "stacked"), spec, meta["user_id"])
