"""Command-line entry points.

Exit codes: 0 success, 2 parameter error, 3 data or contamination error,
4 numerical divergence. Seeds resolve as ``--seed`` flag, then the
``MTA_SEED`` environment variable, then the pipeline config.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ..backbone import BackboneConfig, init_model, load_model, save_model
from ..bank import build_bank, load_bank, save_bank
from ..errors import DataError, MTAError, ParameterError
from ..numerics import SeededRng
from ..personalize import personalize_user, save_personalized, user_rng
from .config import PipelineConfig, env_seed, load_pipeline_config
from .corpus import read_corpus, read_ids, split_users, write_corpus
from .experiments import evaluate, format_table, reports_json, run_ablation, sweep
from .synthetic import SyntheticSpec, generate_corpus, held_out_ids


def _resolve(args) -> PipelineConfig:
    cfg = load_pipeline_config(getattr(args, "config", None))
    seed = args.seed if getattr(args, "seed", None) is not None else env_seed()
    bank, pers = cfg.bank, cfg.personalize
    anchor, stacked = bank.anchor_training, pers.stacked
    lr_scale = getattr(args, "lr_scale", None)
    if lr_scale is not None:
        anchor = dataclasses.replace(anchor, lr_scale=lr_scale)
        stacked = dataclasses.replace(stacked, lr_scale=lr_scale)
    if getattr(args, "anchor_epochs", None) is not None:
        anchor = dataclasses.replace(anchor, epochs=args.anchor_epochs)
    anchor_rank = getattr(args, "anchor_rank", None)
    if anchor_rank is not None:
        anchor = dataclasses.replace(anchor, rank=anchor_rank)
    bank = dataclasses.replace(
        bank,
        anchor_training=anchor,
        anchor_rank=anchor.rank,
        num_clusters=getattr(args, "clusters", None) or bank.num_clusters,
        seed=bank.seed if seed is None else seed,
    )
    if getattr(args, "rank", None) is not None:
        stacked = dataclasses.replace(stacked, rank=args.rank)
    if getattr(args, "epochs", None) is not None:
        stacked = dataclasses.replace(stacked, epochs=args.epochs)
    pers = dataclasses.replace(
        pers,
        stacked=stacked,
        top_k=getattr(args, "top_k", None) or pers.top_k,
        merge_mode=getattr(args, "merge_mode", None) or pers.merge_mode,
    )
    return dataclasses.replace(cfg, bank=bank, personalize=pers, seed=cfg.seed if seed is None else seed)


def _write(path: str | None, text: str) -> None:
    if path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def cmd_gen_corpus(args) -> int:
    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    spec = SyntheticSpec.from_dict(raw.get("synthetic", raw))
    seed = args.seed if args.seed is not None else env_seed()
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    corpus = generate_corpus(spec)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, args.out)
    if args.test_ids_out:
        _write(args.test_ids_out, "".join(uid + "\n" for uid in held_out_ids(corpus)))
    print(f"wrote {len(corpus)} users to {args.out}")
    return 0


def cmd_init_model(args) -> int:
    cfg = load_pipeline_config(args.config)
    model_cfg = cfg.model
    if args.input_dim or args.hidden or args.classes or args.nonlinearity or args.task:
        model_cfg = BackboneConfig(
            input_dim=args.input_dim or model_cfg.input_dim,
            hidden_dims=tuple(args.hidden) if args.hidden else model_cfg.hidden_dims,
            num_classes=args.classes or (1 if args.task == "rating" else model_cfg.num_classes),
            nonlinearity=args.nonlinearity or model_cfg.nonlinearity,
            task=args.task or model_cfg.task,
        )
    seed = args.seed if args.seed is not None else (env_seed() if env_seed() is not None else cfg.model_seed)
    save_model(init_model(model_cfg, SeededRng(seed)), args.out)
    print(f"wrote base model {model_cfg.layer_shapes} to {args.out}")
    return 0


def cmd_build_bank(args) -> int:
    cfg = _resolve(args)
    corpus = read_corpus(args.corpus)
    if args.test_ids:
        corpus, _ = split_users(corpus, read_ids(args.test_ids))
    bank = build_bank(corpus, load_model(args.model), cfg.bank)
    save_bank(bank, args.out)
    print(f"bank of {len(bank)} anchors: {', '.join(bank.anchor_ids)} -> {args.out}")
    return 0


def cmd_personalize(args) -> int:
    cfg = _resolve(args)
    corpus = {u.user_id: u for u in read_corpus(args.corpus)}
    if args.user_id not in corpus:
        raise DataError(f"user {args.user_id!r} not in {args.corpus}")
    bank = load_bank(args.bank)
    pm = personalize_user(
        bank, load_model(args.model), corpus[args.user_id], cfg.personalize, user_rng(cfg.seed, args.user_id)
    )
    save_personalized(pm, args.out)
    spec = pm.merge_spec
    pairs = ", ".join(f"{a}:{c:.4f}" for a, c in zip(spec.anchor_ids, spec.coefficients))
    print(f"personalized {args.user_id} (merge {pairs}) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    corpus = read_corpus(args.corpus)
    _, test_users = split_users(corpus, read_ids(args.test_ids))
    report = evaluate(load_bank(args.bank), load_model(args.model), test_users, cfg.personalize, cfg.seed)
    _write(args.report, report.to_json())
    print(format_table({"mta": report}))
    return 0


def _corpus_and_ids(args):
    corpus = read_corpus(args.corpus)
    ids = read_ids(args.test_ids) if args.test_ids else held_out_ids(corpus)
    if not ids:
        raise ParameterError("no test users: pass --test-ids")
    return corpus, ids


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    corpus, ids = _corpus_and_ids(args)
    logs = {} if args.curves else None
    reports = run_ablation(corpus, ids, load_model(args.model), cfg.bank, cfg.personalize, cfg.seed, loss_logs=logs)
    _write(args.report, reports_json(reports, kind="ablation"))
    if logs is not None:
        _write(args.curves, json.dumps(logs, indent=2) + "\n")
    print(format_table(reports))
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    corpus, ids = _corpus_and_ids(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    reports = sweep(args.param, values, corpus, ids, load_model(args.model), cfg.bank, cfg.personalize, cfg.seed)
    _write(args.report, reports_json(reports, kind="sweep", param=args.param, values=values))
    print(format_table(reports, key_name=args.param))
    return 0


def _add_pipeline_args(p, bank=True, personal=True):
    p.add_argument("--config", help="pipeline JSON file, or a shipped config name (fixture, reported)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr-scale", type=float, help="multiplier applied to the configured learning rates")
    if bank:
        p.add_argument("--clusters", type=int, help="number of clusters / anchors V")
        p.add_argument("--anchor-rank", type=int)
        p.add_argument("--anchor-epochs", type=int)
    if personal:
        p.add_argument("--top-k", type=int)
        p.add_argument("--rank", type=int, help="stacked adapter rank")
        p.add_argument("--epochs", type=int, help="stacked adapter epochs")
        p.add_argument("--merge-mode", choices=["factor", "delta"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mta", description="Merge-then-adapt personalization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a planted-cluster synthetic corpus")
    p.add_argument("--spec", help="SyntheticSpec JSON (or a pipeline file with a 'synthetic' key)")
    p.add_argument("--out", required=True)
    p.add_argument("--test-ids-out", help="also write the held-out user ids here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("init-model", help="write a seeded random base model checkpoint")
    p.add_argument("--config")
    p.add_argument("--input-dim", type=int)
    p.add_argument("--hidden", type=int, action="append", help="hidden width; repeat for deeper models")
    p.add_argument("--classes", type=int)
    p.add_argument("--nonlinearity", choices=["tanh", "relu"])
    p.add_argument("--task", choices=["classification", "rating"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("build-bank", help="cluster users and train the anchor adapters")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--test-ids", help="users to exclude from bank construction")
    p.add_argument("--out", required=True)
    _add_pipeline_args(p, personal=False)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("personalize", help="merge, freeze and stack for one user")
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--user-id", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_args(p, bank=False)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("evaluate", help="personalize and score every test user")
    p.add_argument("--bank", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--test-ids", required=True)
    p.add_argument("--report")
    _add_pipeline_args(p, bank=False)
    p.set_defaults(func=cmd_evaluate)

    for name, func, help_text in (
        ("ablate", cmd_ablate, "Adapt-Only vs Merged-Only vs full pipeline"),
        ("sweep", cmd_sweep, "rerun the pipeline over one parameter"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--test-ids", help="held-out ids file (default: synthetic held-out users)")
        p.add_argument("--report")
        _add_pipeline_args(p)
        if name == "ablate":
            p.add_argument("--curves", help="write anchor and stacked loss curves here")
        else:
            p.add_argument("--param", required=True, choices=["alpha_fixed", "top_k", "stacked_rank"])
            p.add_argument("--values", required=True, help="comma-separated values")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MTAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
