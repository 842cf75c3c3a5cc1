"""Pipeline configuration files.

A pipeline file is JSON with any of the keys ``synthetic``, ``model``,
``model_seed``, ``bank``, ``personalize`` and ``seed``; missing keys fall
back to the dataclass defaults. Shipped files live in ``mta/configs``:
``reported.json`` records the reported adaptation hyperparameters verbatim and
``fixture.json`` is the desk-scale synthetic benchmark.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..backbone import BackboneConfig
from ..bank import BankConfig
from ..errors import ParameterError
from ..personalize import PersonalizationConfig
from .synthetic import SyntheticSpec

SEED_ENV = "MTA_SEED"


@dataclass(frozen=True)
class PipelineConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: BackboneConfig = field(default_factory=lambda: BackboneConfig(256, (32,), 4))
    model_seed: int = 1000
    bank: BankConfig = field(default_factory=BankConfig)
    personalize: PersonalizationConfig = field(default_factory=PersonalizationConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {"synthetic", "model", "model_seed", "bank", "personalize", "seed"}
        if unknown:
            raise ParameterError(f"unknown pipeline config keys {sorted(unknown)}")
        default = cls()
        return cls(
            synthetic=SyntheticSpec.from_dict(d["synthetic"]) if "synthetic" in d else default.synthetic,
            model=BackboneConfig.from_dict(d["model"]) if "model" in d else default.model,
            model_seed=int(d.get("model_seed", default.model_seed)),
            bank=BankConfig.from_dict(d["bank"]) if "bank" in d else default.bank,
            personalize=PersonalizationConfig.from_dict(d["personalize"]) if "personalize" in d else default.personalize,
            seed=int(d.get("seed", default.seed)),
        )

    def to_dict(self) -> dict:
        return {
            "synthetic": self.synthetic.to_dict(),
            "model": self.model.to_dict(),
            "model_seed": self.model_seed,
            "bank": self.bank.to_dict(),
            "personalize": self.personalize.to_dict(),
            "seed": self.seed,
        }


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("mta") / "configs" / f"{name}.json"))


def load_pipeline_config(path: str | Path | None) -> PipelineConfig:
    """Load a pipeline file; a bare name such as ``fixture`` selects a shipped config."""
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = shipped_config_path(str(path))
    try:
        return PipelineConfig.from_dict(json.loads(p.read_text()))
    except FileNotFoundError as exc:
        raise ParameterError(f"config file not found: {p}") from exc
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ParameterError(f"invalid config {p}: {exc}") from exc


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ParameterError(f"{SEED_ENV}={raw!r} is not an integer") from exc
