"""Committed regression fixtures; set MTA_REGEN_FIXTURES=1 to rewrite them."""

from __future__ import annotations

import os
from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"


def regenerating() -> bool:
    return os.environ.get("MTA_REGEN_FIXTURES") == "1"


def check_fixture(name: str, text: str) -> str:
    """Return the committed text for ``name`` (writing it first when regenerating)."""
    path = FIXTURES / name
    if regenerating():
        FIXTURES.mkdir(exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    assert path.is_file(), f"missing fixture {path}; run with MTA_REGEN_FIXTURES=1"
    return path.read_text(encoding="utf-8")
