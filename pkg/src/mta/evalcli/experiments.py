"""Evaluation, the three-way ablation, and parameter sweeps."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..backbone import BackboneModel
from ..bank import BankConfig, LoraBank, build_bank
from ..errors import ContaminationError, ParameterError
from ..personalize import PersonalizationConfig, PersonalizedModel, adapt_only, personalize_user, predict, user_rng
from ..profiling import Encoder, UserRecord
from . import metrics
from .corpus import query_examples, split_users

VARIANTS = ("adapt_only", "merged_only", "mta")
SWEEP_PARAMS = ("alpha_fixed", "top_k", "stacked_rank")


@dataclass
class MetricsReport:
    task: str
    metrics: dict[str, float]
    per_user: dict[str, dict]
    config: dict = field(default_factory=dict)
    seed: int = 0
    variant: str = "mta"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "task": self.task,
            "seed": self.seed,
            "metrics": self.metrics,
            "per_user": self.per_user,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _label_tokens(labels) -> list[str]:
    return [f"label{int(v)}" for v in labels]


def score_users(
    models: dict[str, PersonalizedModel],
    users: Sequence[UserRecord],
    encoder: Encoder | None,
    variant: str = "mta",
    config: dict | None = None,
    seed: int = 0,
) -> MetricsReport:
    """Predict every query of every user and aggregate; users are joined in id order."""
    users = sorted(users, key=lambda u: u.user_id)
    base_cfg = next(iter(models.values())).frozen_base.config
    task = base_cfg.task
    all_preds, all_golds, per_user = [], [], {}
    for user in users:
        pm = models[user.user_id]
        queries = query_examples(user, task, encoder)
        if not queries:
            continue
        preds = [predict(pm, q) for q in queries]
        golds = [q.target for q in queries]
        all_preds += preds
        all_golds += golds
        entry = {"n": len(golds), "predictions": preds}
        if task == "classification":
            entry["accuracy"] = metrics.accuracy(preds, golds)
            entry["rouge1"] = metrics.rouge1(_label_tokens(preds), _label_tokens(golds))
            entry["rougeL"] = metrics.rougeL(_label_tokens(preds), _label_tokens(golds))
        else:
            entry["mae"] = metrics.mae(preds, golds)
            entry["rmse"] = metrics.rmse(preds, golds)
        if pm.merge_spec is not None:
            entry["merge"] = pm.merge_spec.to_dict()
        per_user[user.user_id] = entry
    if not all_golds:
        raise ParameterError("no queries to evaluate")
    if task == "classification":
        summary = {
            "accuracy": metrics.accuracy(all_preds, all_golds),
            "macro_f1": metrics.macro_f1(all_preds, all_golds, base_cfg.num_classes),
            "rouge1": sum(e["rouge1"] for e in per_user.values()) / len(per_user),
            "rougeL": sum(e["rougeL"] for e in per_user.values()) / len(per_user),
        }
    else:
        summary = {"mae": metrics.mae(all_preds, all_golds), "rmse": metrics.rmse(all_preds, all_golds)}
    return MetricsReport(task, summary, per_user, config or {}, seed, variant)


def check_disjoint(bank: LoraBank, test_users: Sequence[UserRecord]) -> None:
    overlap = sorted(set(bank.anchor_ids) & {u.user_id for u in test_users})
    if overlap:
        raise ContaminationError(f"anchor users also in the evaluation set: {overlap}")


def personalize_all(
    bank: LoraBank,
    base: BackboneModel,
    users: Sequence[UserRecord],
    config: PersonalizationConfig,
    seed: int,
    encoder: Encoder | None = None,
) -> dict[str, PersonalizedModel]:
    check_disjoint(bank, users)
    return {u.user_id: personalize_user(bank, base, u, config, user_rng(seed, u.user_id), encoder) for u in users}


def _config_echo(bank_cfg: BankConfig | None, pers_cfg: PersonalizationConfig) -> dict:
    echo = {"personalize": pers_cfg.to_dict()}
    if bank_cfg is not None:
        echo["bank"] = bank_cfg.to_dict()
    return echo


def evaluate(
    bank: LoraBank,
    base: BackboneModel,
    users: Sequence[UserRecord],
    pers_cfg: PersonalizationConfig,
    seed: int,
    encoder: Encoder | None = None,
) -> MetricsReport:
    models = personalize_all(bank, base, users, pers_cfg, seed, encoder)
    return score_users(models, users, encoder or bank.encoder, "mta", _config_echo(bank.config, pers_cfg), seed)


def run_ablation(
    corpus: Sequence[UserRecord],
    test_ids: Sequence[str],
    base: BackboneModel,
    bank_cfg: BankConfig,
    pers_cfg: PersonalizationConfig,
    seed: int,
    encoder: Encoder | None = None,
    bank: LoraBank | None = None,
    loss_logs: dict | None = None,
) -> dict[str, MetricsReport]:
    """Adapt-Only, Merged-Only and full MTA on identical test users and seeds.

    With ``loss_logs`` given, it receives ``{"anchors": {id: curve},
    "stacked": {id: curve}}`` epoch-mean training losses (stacked curves are
    from the full-MTA variant).
    """
    bank_users, test_users = split_users(corpus, test_ids)
    anchor_logs = {} if loss_logs is not None else None
    if bank is None:
        bank = build_bank(bank_users, base, bank_cfg, encoder, anchor_logs)
    check_disjoint(bank, test_users)
    encoder = encoder or bank.encoder
    echo = _config_echo(bank.config, pers_cfg)
    merged_cfg = dataclasses.replace(pers_cfg, stacked=dataclasses.replace(pers_cfg.stacked, epochs=0))
    stacked_logs: dict[str, list] = {}

    def full(u):
        log = stacked_logs.setdefault(u.user_id, [])
        return personalize_user(bank, base, u, pers_cfg, user_rng(seed, u.user_id), encoder, log)

    builders: dict[str, Callable[[UserRecord], PersonalizedModel]] = {
        "adapt_only": lambda u: adapt_only(base, u, pers_cfg, user_rng(seed, u.user_id), encoder),
        "merged_only": lambda u: personalize_user(bank, base, u, merged_cfg, user_rng(seed, u.user_id), encoder),
        "mta": full,
    }
    reports = {}
    for variant in VARIANTS:
        models = {u.user_id: builders[variant](u) for u in test_users}
        reports[variant] = score_users(models, test_users, encoder, variant, echo, seed)
    if loss_logs is not None:
        loss_logs["anchors"] = anchor_logs or {}
        loss_logs["stacked"] = dict(sorted(stacked_logs.items()))
    return reports


def sweep(
    param: str,
    values: Sequence,
    corpus: Sequence[UserRecord],
    test_ids: Sequence[str],
    base: BackboneModel,
    bank_cfg: BankConfig,
    pers_cfg: PersonalizationConfig,
    seed: int,
    encoder: Encoder | None = None,
    bank: LoraBank | None = None,
) -> dict[str, MetricsReport]:
    """Full-pipeline report per value of ``param``, all sharing one bank and seed."""
    if param not in SWEEP_PARAMS:
        raise ParameterError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if not values:
        raise ParameterError("sweep needs at least one value")
    configs = []
    for v in values:
        if param == "alpha_fixed":
            cfg = dataclasses.replace(pers_cfg, top_k=2, fixed_alpha=float(v))
        elif param == "top_k":
            cfg = dataclasses.replace(pers_cfg, top_k=int(v), fixed_alpha=None)
        else:
            cfg = dataclasses.replace(pers_cfg, stacked=dataclasses.replace(pers_cfg.stacked, rank=int(v)))
        configs.append((str(v), cfg))
    bank_users, test_users = split_users(corpus, test_ids)
    if bank is None:
        bank = build_bank(bank_users, base, bank_cfg, encoder)
    return {key: evaluate(bank, base, test_users, cfg, seed, encoder) for key, cfg in configs}


def format_table(rows: dict[str, MetricsReport], key_name: str = "variant") -> str:
    names = list(next(iter(rows.values())).metrics)
    header = f"{key_name:<14}" + "".join(f"{n:>10}" for n in names)
    lines = [header, "-" * len(header)]
    for key, rep in rows.items():
        lines.append(f"{key:<14}" + "".join(f"{rep.metrics[n]:>10.4f}" for n in names))
    return "\n".join(lines)


def reports_json(reports: dict[str, MetricsReport], **extra) -> str:
    payload = dict(extra)
    payload["reports"] = {k: r.to_dict() for k, r in reports.items()}
    return json.dumps(payload, indent=2) + "\n"
