"""Configuration generators shared by the acceptance suite."""

from __future__ import annotations

import numpy as np

from mta.adapters import LoraModule
from mta.backbone import BackboneConfig, BackboneModel, Example, init_model, mean_loss
from mta.backbone import backward_adapter
from mta.numerics import SeededRng


def random_factors(config: BackboneConfig, rank: int, rng: SeededRng, scale: float, label: str = "") -> LoraModule:
    layers = []
    for d_out, d_in in config.layer_shapes:
        a = rng.uniform(rank * d_in, -scale, scale).reshape(rank, d_in)
        b = rng.uniform(d_out * rank, -scale, scale).reshape(d_out, rank)
        layers.append((a, b))
    return LoraModule(rank, tuple(layers), label)


def gradient_case(seed: int):
    """Random (model, merged, stacked, example) with d <= 8, <= 2 hidden layers, rank <= 3."""
    rng = SeededRng(seed)
    rank = 1 + rng.integer(3)
    depth = rng.integer(3)
    input_dim = rank + rng.integer(9 - rank)
    hidden = tuple(rank + rng.integer(9 - rank) for _ in range(depth))
    task = "rating" if rng.integer(4) == 0 else "classification"
    classes = 1 if task == "rating" else 1 + rng.integer(8)
    nonlinearity = "relu" if rng.integer(2) else "tanh"
    cfg = BackboneConfig(input_dim, hidden, classes, nonlinearity, task)
    model = init_model(cfg, rng).frozen_view()
    merged = random_factors(cfg, rank, rng, 0.3, "merged") if rng.integer(2) else None
    stacked = random_factors(cfg, rank, rng, 0.3, "stacked")
    target = rng.integer(classes) if task == "classification" else 1.0 + 4.0 * rng.uniform(1)[0]
    return model, merged, stacked, Example(rng.uniform(input_dim, -1.5, 1.5), target)


def finite_difference_errors(model: BackboneModel, merged, stacked: LoraModule, example: Example, h: float, floor: float):
    """Elementwise relative errors between analytic and central-difference adapter gradients."""
    analytic = backward_adapter(model, merged, stacked, example)
    fixed = [merged] if merged is not None else []
    errors = []
    for i, grads in enumerate(analytic):
        for which in (0, 1):
            base = np.array(stacked.per_layer[i][which])
            for idx in np.ndindex(base.shape):
                losses = []
                for sign in (1.0, -1.0):
                    pert = base.copy()
                    pert[idx] += sign * h
                    layers = [list(p) for p in stacked.per_layer]
                    layers[i][which] = pert
                    probe = LoraModule(stacked.rank, tuple(tuple(p) for p in layers))
                    losses.append(mean_loss(model, fixed + [probe], [example]))
                fd = (losses[0] - losses[1]) / (2 * h)
                g = float(grads[which][idx])
                errors.append(abs(fd - g) / max(abs(fd), abs(g), floor))
    return errors


RESULTS: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line; the caller asserts ``ok`` afterwards."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)
