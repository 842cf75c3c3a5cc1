"""JSON-lines corpus I/O and the featurizer that turns items into backbone examples."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..backbone import Example
from ..errors import DataError, ParameterError
from ..profiling import Encoder, HistoryItem, Query, UserRecord, encode_text


def record_to_dict(user: UserRecord) -> dict:
    history = []
    for item in user.history:
        entry = {"text": item.text}
        if item.target is not None:
            entry["target"] = item.target
        history.append(entry)
    queries = []
    for q in user.queries:
        entry = {"text": q.text} if q.text is not None else {"features": list(q.features)}
        entry["target"] = q.target
        queries.append(entry)
    return {"user_id": user.user_id, "history": history, "queries": queries}


def record_from_dict(d: dict) -> UserRecord:
    try:
        history = tuple(HistoryItem(h["text"], h.get("target")) for h in d["history"])
        queries = tuple(
            Query(q["target"], text=q.get("text"), features=tuple(q["features"]) if "features" in q else None)
            for q in d.get("queries", [])
        )
        return UserRecord(str(d["user_id"]), history, queries)
    except (KeyError, TypeError, ParameterError) as exc:
        raise DataError(f"malformed user record: {exc}") from exc


def write_corpus(users: Iterable[UserRecord], path: str | Path) -> None:
    lines = [json.dumps(record_to_dict(u), ensure_ascii=False) for u in users]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def read_corpus(path: str | Path) -> list[UserRecord]:
    users, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                user = record_from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if user.user_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate user_id {user.user_id!r}")
            seen.add(user.user_id)
            users.append(user)
    return users


def read_ids(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def text_features(text: str, encoder: Encoder | None = None) -> np.ndarray:
    """Encoder output rescaled to unit RMS (norm sqrt(D)) so fan-in initializations apply."""
    v = encode_text(text, encoder)
    return v * math.sqrt(v.shape[0])


def _target(value, task: str):
    if task == "classification":
        if isinstance(value, bool) or not float(value).is_integer():
            raise DataError(f"classification target must be an integer, got {value!r}")
        return int(value)
    return float(value)


def history_examples(user: UserRecord, task: str, encoder: Encoder | None = None) -> list[Example]:
    examples = []
    for i, item in enumerate(user.history):
        if item.target is None:
            raise DataError(f"user {user.user_id!r}: history item {i} has no target")
        examples.append(Example(text_features(item.text, encoder), _target(item.target, task)))
    return examples


def query_examples(user: UserRecord, task: str, encoder: Encoder | None = None) -> list[Example]:
    examples = []
    for q in user.queries:
        feats = text_features(q.text, encoder) if q.text is not None else np.asarray(q.features, dtype=np.float64)
        examples.append(Example(feats, _target(q.target, task)))
    return examples


def split_users(corpus: Sequence[UserRecord], test_ids: Iterable[str]) -> tuple[list[UserRecord], list[UserRecord]]:
    """Partition a corpus into (bank users, test users), preserving corpus order."""
    wanted = set(test_ids)
    known = {u.user_id for u in corpus}
    missing = sorted(wanted - known)
    if missing:
        raise DataError(f"test ids not in corpus: {missing[:5]}")
    bank_users = [u for u in corpus if u.user_id not in wanted]
    test_users = [u for u in corpus if u.user_id in wanted]
    return bank_users, test_users
