"""Shared builders for small models, adapters and users."""

from __future__ import annotations

import numpy as np
import pytest

from mta.adapters import LoraModule
from mta.backbone import BackboneConfig, BackboneModel, init_model
from mta.evalcli.config import load_pipeline_config
from mta.numerics import SeededRng
from mta.profiling import HistoryItem, Query, UserRecord


def random_model(seed, input_dim=5, hidden=(4,), classes=3, nonlinearity="tanh", task="classification"):
    cfg = BackboneConfig(input_dim, tuple(hidden), 1 if task == "rating" else classes, nonlinearity, task)
    return init_model(cfg, SeededRng(seed))


def random_lora(config: BackboneConfig, rank: int, seed: int, scale: float = 0.3, label: str = "") -> LoraModule:
    """Adapter with both factors random (a fresh init_lora has B = 0)."""
    rng = SeededRng(seed)
    layers = []
    for d_out, d_in in config.layer_shapes:
        a = rng.uniform(rank * d_in, -scale, scale).reshape(rank, d_in)
        b = rng.uniform(d_out * rank, -scale, scale).reshape(d_out, rank)
        layers.append((a, b))
    return LoraModule(rank, tuple(layers), label)


def hand_model(layers, nonlinearity="tanh", task="classification") -> BackboneModel:
    ws = [np.asarray(w, dtype=float) for w, _ in layers]
    cfg = BackboneConfig(ws[0].shape[1], tuple(w.shape[0] for w in ws[:-1]), ws[-1].shape[0], nonlinearity, task)
    return BackboneModel(cfg, tuple((np.asarray(w, float), np.asarray(b, float)) for w, b in layers))


def make_user(uid, texts, targets=None, queries=()):
    targets = targets if targets is not None else [0] * len(texts)
    return UserRecord(uid, tuple(HistoryItem(t, y) for t, y in zip(texts, targets)), tuple(Query(y, text=t) for t, y in queries))


@pytest.fixture(scope="session")
def fixture_config():
    return load_pipeline_config("fixture")


def pytest_terminal_summary(terminalreporter):
    from acceptance_support import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
