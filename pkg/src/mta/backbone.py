"""A small fully-differentiable MLP standing in for the base LLM.

Every affine layer can host any number of low-rank adapters; the
pre-activation of layer ``l`` is::

    z_l = W_l a + b_l + sum_k B_kl (A_kl a)

with the nonlinearity between layers and nothing after the last one.
Gradients are derived by hand and only ever reach the factors of the
adapter being trained.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import numerics
from .errors import (
    ChecksumError,
    DataError,
    DivergenceError,
    MissingFileError,
    ParameterError,
    ShapeError,
    StateError,
    TargetIndexError,
    VersionMismatchError,
)

if TYPE_CHECKING:
    from .adapters import LoraModule

MODEL_FORMAT_VERSION = 1
TASKS = ("classification", "rating")
RATING_RANGE = (1.0, 5.0)


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    nonlinearity: str = "tanh"
    task: str = "classification"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.num_classes) + self.hidden_dims) < 1:
            raise ParameterError("all backbone dims must be >= 1")
        if self.nonlinearity not in ("tanh", "relu"):
            raise ParameterError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.task not in TASKS:
            raise ParameterError(f"unknown task {self.task!r}")
        if self.task == "rating" and self.num_classes != 1:
            raise ParameterError("rating tasks use a scalar head (num_classes=1)")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(d_out, d_in) per affine layer."""
        dims = (self.input_dim,) + self.hidden_dims + (self.num_classes,)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "nonlinearity": self.nonlinearity,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            num_classes=int(d["num_classes"]),
            nonlinearity=d.get("nonlinearity", "tanh"),
            task=d.get("task", "classification"),
        )


@dataclass(frozen=True)
class BackboneModel:
    config: BackboneConfig
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    frozen: bool = False

    def __post_init__(self):
        layers = tuple((numerics.frozen_copy(w), numerics.frozen_copy(b)) for w, b in self.layers)
        shapes = self.config.layer_shapes
        if len(layers) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} layers, got {len(layers)}")
        for i, ((w, b), (d_out, d_in)) in enumerate(zip(layers, shapes)):
            if w.shape != (d_out, d_in) or b.shape != (d_out,):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected ({d_out}, {d_in}) / ({d_out},)"
                )
        object.__setattr__(self, "layers", layers)

    def frozen_view(self) -> "BackboneModel":
        """Frozen twin sharing the (read-only) weight arrays."""
        return dataclasses.replace(self, frozen=True)

    def checksum(self) -> str:
        return numerics.checksum(t for layer in self.layers for t in layer)


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    target: float | int

    def __post_init__(self):
        f = numerics.frozen_copy(self.features)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise DataError("example features must be a finite vector")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class TrainingConfig:
    """Adapter training hyperparameters.

    Defaults follow the reported adaptation settings (rank 4, batch 2,
    4 accumulation steps, lr 5e-5). ``lr_scale`` multiplies ``lr`` so the
    reported learning rate can stay on record while a toy-sized model trains
    at a usable step size.
    """

    rank: int = 4
    epochs: int = 2
    lr: float = 5e-5
    batch_size: int = 2
    grad_accum: int = 4
    lr_scale: float = 1.0

    def __post_init__(self):
        if min(self.rank, self.batch_size, self.grad_accum) < 1:
            raise ParameterError("rank, batch_size and grad_accum must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if not (self.lr > 0 and self.lr_scale > 0):
            raise ParameterError("lr and lr_scale must be positive")

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def init_model(config: BackboneConfig, rng: numerics.SeededRng) -> BackboneModel:
    """Random base with LeCun-uniform weights (variance 1/d_in) and small biases."""
    layers = []
    for d_out, d_in in config.layer_shapes:
        bound = math.sqrt(3.0 / d_in)
        w = numerics.uniform_matrix(rng, d_out, d_in, -bound, bound)
        b = rng.uniform(d_out, -0.1, 0.1)
        layers.append((w, b))
    return BackboneModel(config, tuple(layers))


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _check_adapters(model: BackboneModel, adapters: Sequence["LoraModule"]) -> None:
    shapes = model.config.layer_shapes
    for adapter in adapters:
        if len(adapter.per_layer) != len(shapes):
            raise ShapeError(
                f"adapter {adapter.label!r} has {len(adapter.per_layer)} layers, model has {len(shapes)}"
            )
        for i, ((a, b), (d_out, d_in)) in enumerate(zip(adapter.per_layer, shapes)):
            if a.shape[1] != d_in or b.shape[0] != d_out or a.shape[0] != b.shape[1]:
                raise ShapeError(
                    f"layer {i}: adapter {adapter.label!r} factors A{a.shape} B{b.shape} "
                    f"do not fit weight ({d_out}, {d_in})"
                )


def _forward_trace(model, adapters, x):
    """Run the network, keeping each layer's input, pre-activation and output."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.config.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, expected ({model.config.input_dim},)")
    _check_adapters(model, adapters)
    kind = model.config.nonlinearity
    last = len(model.layers) - 1
    inputs, pre, post = [], [], []
    a = x
    for i, (w, b) in enumerate(model.layers):
        inputs.append(a)
        z = w @ a + b
        for adapter in adapters:
            lo_a, lo_b = adapter.per_layer[i]
            z = z + lo_b @ (lo_a @ a)
        pre.append(z)
        a = z if i == last else _activate(kind, z)
        post.append(a)
    return inputs, pre, post


def forward(model: BackboneModel, adapters: Sequence["LoraModule"], x) -> np.ndarray:
    return _forward_trace(model, adapters, x)[2][-1]


def cross_entropy_loss(logits: np.ndarray, target: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(target) < logits.shape[0] or int(target) != target:
        raise TargetIndexError(f"target {target} outside [0, {logits.shape[0]})")
    m = float(np.max(logits))
    lse = m + math.log(float(np.sum(np.exp(logits - m))))
    return lse - float(logits[int(target)])


def squared_error_loss(output: np.ndarray, target: float) -> float:
    d = float(output[0]) - float(target)
    return d * d  # overflows to inf rather than raising


def example_loss(config: BackboneConfig, output: np.ndarray, target) -> float:
    if config.task == "classification":
        return cross_entropy_loss(output, target)
    return squared_error_loss(output, target)


def _output_grad(config, output, target) -> np.ndarray:
    if config.task == "classification":
        p = np.exp(output - np.max(output))
        p /= p.sum()
        p[int(target)] -= 1.0
        return p
    return np.array([2.0 * (float(output[0]) - float(target))])


def _loss_and_grad(model, merged, stacked, example):
    adapters = ([merged] if merged is not None else []) + [stacked]
    inputs, pre, post = _forward_trace(model, adapters, example.features)
    cfg = model.config
    loss = example_loss(cfg, post[-1], example.target)
    delta = _output_grad(cfg, post[-1], example.target)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        a_in = inputs[i]
        s_a, s_b = stacked.per_layer[i]
        grads[i] = (np.outer(s_b.T @ delta, a_in), np.outer(delta, s_a @ a_in))
        if i == 0:
            break
        back = model.layers[i][0].T @ delta
        for adapter in adapters:
            lo_a, lo_b = adapter.per_layer[i]
            back = back + lo_a.T @ (lo_b.T @ delta)
        delta = back * _activate_grad(cfg.nonlinearity, pre[i - 1], post[i - 1])
    return loss, grads


def backward_adapter(
    model: BackboneModel,
    merged: "LoraModule | None",
    stacked: "LoraModule",
    example: Example,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(dL/dA, dL/dB)`` for the stacked adapter only."""
    if not model.frozen:
        raise StateError("backward_adapter requires a frozen base model")
    return _loss_and_grad(model, merged, stacked, example)[1]


def mean_loss(model, adapters, data: Sequence[Example]) -> float:
    return float(np.mean([example_loss(model.config, forward(model, adapters, ex.features), ex.target) for ex in data]))


def _adapter_checksum(adapter) -> str:
    if adapter is None:
        return ""
    return numerics.checksum(t for pair in adapter.per_layer for t in pair)


def train_adapter(
    model: BackboneModel,
    merged: "LoraModule | None",
    init: "LoraModule",
    data: Sequence[Example],
    cfg: TrainingConfig,
    rng: numerics.SeededRng,
    loss_log: list | None = None,
) -> "LoraModule":
    """Minibatch SGD on the factors of ``init``; base and ``merged`` stay untouched.

    Each epoch visits the examples in one seeded permutation. Per-example
    gradients are summed over ``batch_size * grad_accum`` examples, averaged,
    and applied as one update; a partial window at the end of an epoch is
    flushed the same way. Epoch-mean training losses are appended to
    ``loss_log`` when given.
    """
    if not model.frozen:
        raise StateError("train_adapter requires a frozen base model")
    if not data:
        raise ParameterError("training data is empty")
    if init.rank != cfg.rank:
        raise ParameterError(f"adapter rank {init.rank} does not match config rank {cfg.rank}")
    before = (model.checksum(), _adapter_checksum(merged))

    lr = cfg.effective_lr
    window = cfg.batch_size * cfg.grad_accum
    current = init
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        acc, count = None, 0
        for pos, idx in enumerate(order):
            loss, grads = _loss_and_grad(model, merged, current, data[idx])
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            step += 1
            epoch_losses.append(loss)
            acc = grads if acc is None else [(ga + da, gb + db) for (ga, gb), (da, db) in zip(acc, grads)]
            count += 1
            if count == window or pos == len(order) - 1:
                per_layer = tuple(
                    (a - (lr / count) * ga, b - (lr / count) * gb)
                    for (a, b), (ga, gb) in zip(current.per_layer, acc)
                )
                if not all(np.all(np.isfinite(a)) and np.all(np.isfinite(b)) for a, b in per_layer):
                    raise DivergenceError(step, float("nan"))
                current = dataclasses.replace(current, per_layer=per_layer)
                acc, count = None, 0
        if loss_log is not None:
            loss_log.append(float(np.mean(epoch_losses)))

    if (model.checksum(), _adapter_checksum(merged)) != before:
        raise StateError("frozen parameters changed during adapter training")
    return current


def save_model(model: BackboneModel, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, (w, b) in enumerate(model.layers):
        entry = {}
        for name, t in (("weight", w), ("bias", b)):
            fname = f"layer{i}.{name}.mtat"
            entry[name] = fname
            entry[f"{name}_sha256"] = numerics.write_tensor(root / fname, t)
        layers.append(entry)
    manifest = {
        "format": "mta-model",
        "version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "frozen": model.frozen,
        "layers": layers,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def read_verified(path: Path, sha256: str | None) -> np.ndarray:
    """Read a tensor record, checking its SHA-256 against the manifest first."""
    if not path.is_file():
        raise MissingFileError(f"missing tensor file {path.name} ({path})")
    payload = path.read_bytes()
    if sha256 is not None and hashlib.sha256(payload).hexdigest() != sha256:
        raise ChecksumError(f"checksum mismatch for {path.name}")
    return numerics.tensor_from_bytes(payload, str(path))


def load_model(path: str | Path) -> BackboneModel:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise MissingFileError(f"missing model manifest {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("version") != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"model version {manifest.get('version')}, expected {MODEL_FORMAT_VERSION}")
    layers = []
    for entry in manifest["layers"]:
        w = read_verified(root / entry["weight"], entry.get("weight_sha256"))
        b = read_verified(root / entry["bias"], entry.get("bias_sha256"))
        layers.append((w, b.reshape(-1)))
    return BackboneModel(BackboneConfig.from_dict(manifest["config"]), tuple(layers), bool(manifest["frozen"]))
