"""LoRA adapters: construction, deltas, similarity-weighted merging, materialization.

Merging sums modules left to right in ascending anchor-id order, so the
result is bitwise independent of the order the caller lists them in.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .backbone import BackboneConfig, BackboneModel, _check_adapters, read_verified
from .errors import MissingFileError, ParameterError, ShapeError, StateError, VersionMismatchError

ADAPTER_FORMAT_VERSION = 1
MERGE_MODES = ("factor", "delta")
DEFAULT_SIM_FLOOR = 1e-6


@dataclass(frozen=True)
class LoraModule:
    rank: int
    per_layer: tuple[tuple[np.ndarray, np.ndarray], ...]
    label: str = ""

    def __post_init__(self):
        layers = tuple((numerics.frozen_copy(a), numerics.frozen_copy(b)) for a, b in self.per_layer)
        if not layers:
            raise ShapeError("an adapter needs at least one layer")
        for i, (a, b) in enumerate(layers):
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ShapeError(f"layer {i}: A{a.shape} B{b.shape} inconsistent with rank {self.rank}")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ParameterError(f"layer {i}: non-finite adapter factor")
        object.__setattr__(self, "per_layer", layers)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)

    def checksum(self) -> str:
        return numerics.checksum(t for pair in self.per_layer for t in pair)

    def relabel(self, label: str) -> "LoraModule":
        return dataclasses.replace(self, label=label)


@dataclass(frozen=True)
class MergeSpec:
    anchor_ids: tuple[str, ...]
    similarities: tuple[float, ...]
    coefficients: tuple[float, ...]

    def __post_init__(self):
        for name in ("anchor_ids", "similarities", "coefficients"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        k = len(self.anchor_ids)
        if k < 1 or len(self.similarities) != k or len(self.coefficients) != k:
            raise ParameterError("merge spec lists must share one length >= 1")
        if len(set(self.anchor_ids)) != k:
            raise ParameterError("merge spec anchor ids must be distinct")
        if any(c < 0 for c in self.coefficients):
            raise ParameterError("merge coefficients must be non-negative")
        if abs(sum(self.coefficients) - 1.0) > 1e-12:
            raise ParameterError(f"merge coefficients sum to {sum(self.coefficients)!r}, not 1")

    @classmethod
    def from_similarities(cls, anchor_ids, similarities, sim_floor: float = DEFAULT_SIM_FLOOR) -> "MergeSpec":
        return cls(tuple(anchor_ids), tuple(similarities), merge_coefficients(similarities, sim_floor))

    def to_dict(self) -> dict:
        return {
            "anchor_ids": list(self.anchor_ids),
            "similarities": list(self.similarities),
            "coefficients": list(self.coefficients),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSpec":
        return cls(tuple(d["anchor_ids"]), tuple(d["similarities"]), tuple(d["coefficients"]))


def merge_coefficients(similarities: Sequence[float], sim_floor: float = DEFAULT_SIM_FLOOR) -> tuple[float, ...]:
    """Clamp each similarity to ``sim_floor`` and normalize to a convex combination."""
    if len(similarities) == 0:
        raise ParameterError("need at least one similarity")
    if not sim_floor > 0:
        raise ParameterError("sim_floor must be positive")
    clamped = [max(float(s), sim_floor) for s in similarities]
    total = 0.0
    for s in clamped:
        total += s
    return tuple(s / total for s in clamped)


def min_adapter_dim(config: BackboneConfig) -> int:
    # The output head is exempt: a scalar rating head would rule out every rank.
    return min((config.input_dim,) + config.hidden_dims)


def init_lora(config: BackboneConfig, rank: int, rng: numerics.SeededRng, label: str = "") -> LoraModule:
    """Fresh adapter: A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0."""
    if rank < 1:
        raise ParameterError("rank must be >= 1")
    if rank > min_adapter_dim(config):
        raise ParameterError(f"rank {rank} exceeds the narrowest layer width {min_adapter_dim(config)}")
    per_layer = []
    for d_out, d_in in config.layer_shapes:
        bound = 1.0 / math.sqrt(d_in)
        per_layer.append((numerics.uniform_matrix(rng, rank, d_in, -bound, bound), np.zeros((d_out, rank))))
    return LoraModule(rank, tuple(per_layer), label)


def delta(lora: LoraModule, layer_index: int) -> np.ndarray:
    if not 0 <= layer_index < lora.num_layers:
        raise IndexError(f"layer {layer_index} out of range for {lora.num_layers}-layer adapter")
    a, b = lora.per_layer[layer_index]
    return numerics.matmul(b, a)


def _check_compatible(modules: Sequence[LoraModule]) -> None:
    ref = modules[0]
    for m in modules[1:]:
        if m.rank != ref.rank or m.num_layers != ref.num_layers:
            raise ShapeError(f"cannot merge rank-{m.rank}/{m.num_layers}-layer with rank-{ref.rank}/{ref.num_layers}-layer")
        for i, ((a, b), (ra, rb)) in enumerate(zip(m.per_layer, ref.per_layer)):
            if a.shape != ra.shape or b.shape != rb.shape:
                raise ShapeError(f"layer {i}: factor shapes differ between merged modules")


def _canonical(modules, spec):
    if len(modules) == 0:
        raise ParameterError("nothing to merge")
    if len(modules) != len(spec.anchor_ids):
        raise ParameterError(f"{len(modules)} modules but {len(spec.anchor_ids)} coefficients")
    _check_compatible(modules)
    order = sorted(range(len(modules)), key=lambda i: spec.anchor_ids[i])
    return [modules[i] for i in order], [spec.coefficients[i] for i in order]


def merge(modules: Sequence[LoraModule], spec: MergeSpec, mode: str = "factor") -> LoraModule:
    """Weighted combination of adapters, for any number of anchors.

    ``factor`` mode combines A and B separately (rank preserved, canonical);
    ``delta`` mode stacks ``alpha_i * B_i`` and ``A_i`` so the product equals
    ``sum_i alpha_i B_i A_i`` exactly, at rank ``K * r``.
    """
    if mode not in MERGE_MODES:
        raise ParameterError(f"unknown merge mode {mode!r}")
    mods, coefs = _canonical(modules, spec)
    per_layer = []
    for i in range(mods[0].num_layers):
        if mode == "factor":
            a = coefs[0] * mods[0].per_layer[i][0]
            b = coefs[0] * mods[0].per_layer[i][1]
            for m, c in zip(mods[1:], coefs[1:]):
                a = a + c * m.per_layer[i][0]
                b = b + c * m.per_layer[i][1]
        else:
            a = np.vstack([m.per_layer[i][0] for m in mods])
            b = np.hstack([c * m.per_layer[i][1] for m, c in zip(mods, coefs)])
        per_layer.append((a, b))
    rank = mods[0].rank if mode == "factor" else mods[0].rank * len(mods)
    return LoraModule(rank, tuple(per_layer), "merged")


def merge_pair(first: LoraModule, second: LoraModule, spec: MergeSpec) -> LoraModule:
    """Two-anchor merge ``alpha_a * theta_a + alpha_b * theta_b`` (factor mode)."""
    if len(spec.anchor_ids) != 2:
        raise ParameterError("merge_pair needs a two-anchor spec")
    (ma, mb), (ca, cb) = _canonical([first, second], spec)
    per_layer = tuple(
        (numerics.scale_add(ca, a1, cb, a2), numerics.scale_add(ca, b1, cb, b2))
        for (a1, b1), (a2, b2) in zip(ma.per_layer, mb.per_layer)
    )
    return LoraModule(ma.rank, per_layer, "merged")


def materialize(model: BackboneModel, merged: LoraModule) -> BackboneModel:
    """Fold ``merged`` into the weights and return the frozen result."""
    if model.frozen:
        raise StateError("model is already frozen; materialize expects the unmerged base")
    _check_adapters(model, [merged])
    layers = tuple((w + delta(merged, i), b) for i, (w, b) in enumerate(model.layers))
    return BackboneModel(model.config, layers, frozen=True)


def save_adapter(lora: LoraModule, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, (a, b) in enumerate(lora.per_layer):
        entry = {}
        for name, t in (("A", a), ("B", b)):
            fname = f"layer{i}.{name}.mtat"
            entry[name] = fname
            entry[f"{name}_sha256"] = numerics.write_tensor(root / fname, t)
        layers.append(entry)
    manifest = {
        "format": "mta-adapter",
        "version": ADAPTER_FORMAT_VERSION,
        "label": lora.label,
        "rank": lora.rank,
        "num_layers": lora.num_layers,
        "layers": layers,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_adapter(path: str | Path) -> LoraModule:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise MissingFileError(f"missing adapter manifest {mf}")
    manifest = json.loads(mf.read_text())
    if manifest.get("version") != ADAPTER_FORMAT_VERSION:
        raise VersionMismatchError(f"adapter version {manifest.get('version')}, expected {ADAPTER_FORMAT_VERSION}")
    per_layer = tuple(
        (read_verified(root / e["A"], e.get("A_sha256")), read_verified(root / e["B"], e.get("B_sha256")))
        for e in manifest["layers"]
    )
    if len(per_layer) != manifest["num_layers"]:
        raise ShapeError("adapter manifest layer count disagrees with its layer list")
    return LoraModule(int(manifest["rank"]), per_layer, manifest["label"])
