import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_user
from fixture_io import check_fixture
from mta.adapters import delta
from mta.backbone import BackboneConfig, TrainingConfig, init_model
from mta.bank import BankConfig, build_bank, kmeans, load_bank, save_bank, select_anchor, train_anchor
from mta.errors import ChecksumError, DataError, MissingFileError, ParameterError, VersionMismatchError
from mta.evalcli.synthetic import SyntheticSpec, generate_corpus, is_heldout_id, planted_cluster
from mta.numerics import SeededRng
from mta.profiling import HistoryItem, UserRecord
from oracles import brute_force_partition, is_local_optimum, partition_of

SMALL_MODEL = BackboneConfig(256, (8,), 4)
QUICK = TrainingConfig(rank=2, epochs=2, lr_scale=100)


def small_bank_cfg(v, **kw):
    return BankConfig(num_clusters=v, anchor_rank=2, anchor_training=QUICK, **kw)


def test_kmeans_single_cluster_is_global_mean():
    pts = {f"u{i}": np.array(p) for i, p in enumerate([(0.0, 1.0), (2.0, 3.0), (4.0, -1.0)])}
    cl = kmeans(pts, 1, seed=0)
    np.testing.assert_allclose(cl.centroids[0], [2.0, 1.0], atol=1e-15)
    assert set(cl.assignment.values()) == {0}


def test_kmeans_four_points_matches_brute_force():
    raw = [(0.0, 0.0), (0.0, 1.0), (10.0, 10.0), (10.0, 11.0)]
    ids = ["p0", "p1", "p2", "p3"]
    cl = kmeans(dict(zip(ids, map(np.array, raw))), 2, seed=3)
    best, _ = brute_force_partition(np.array(raw), 2)
    got = partition_of([cl.assignment[i] for i in ids], ids)
    assert got == partition_of(best, ids) == frozenset({frozenset({"p0", "p1"}), frozenset({"p2", "p3"})})


def test_kmeans_too_few_users():
    with pytest.raises(ParameterError):
        kmeans({"a": np.zeros(2)}, 2, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12), st.integers(1, 4))
def test_kmeans_local_optimum_certificate(seed, n, v):
    if v > n:
        return
    rng = SeededRng(seed)
    ids = [f"u{i:02d}" for i in range(n)]
    emb = {uid: rng.normal(3) for uid in ids}
    cl = kmeans(emb, v, seed=seed, restarts=2)
    x = np.stack([emb[i] for i in ids])
    labels = [cl.assignment[i] for i in ids]
    assert len(set(labels)) == v
    assert is_local_optimum(x, labels, cl.centroids)
    assert all(b <= a + 1e-9 for a, b in zip(cl.sse_history, cl.sse_history[1:]))


def test_kmeans_deterministic_and_order_free():
    rng = SeededRng(5)
    emb = {f"u{i}": rng.normal(4) for i in range(9)}
    a = kmeans(emb, 3, seed=1)
    b = kmeans(dict(reversed(list(emb.items()))), 3, seed=1)
    assert a.assignment == b.assignment and a.centroids.tobytes() == b.centroids.tobytes()


def _user(uid, n):
    return UserRecord(uid, tuple(HistoryItem(f"item {i}", 0) for i in range(n)))


def test_select_anchor_rules():
    assert select_anchor([_user("a", 3), _user("b", 7), _user("c", 5)]) == "b"
    assert select_anchor([_user("u2", 5), _user("u1", 5)]) == "u1"
    assert select_anchor([_user("solo", 1)]) == "solo"
    with pytest.raises(ParameterError):
        select_anchor([])


def test_train_anchor_zero_epochs_and_determinism():
    base = init_model(SMALL_MODEL, SeededRng(0))
    user = make_user("a", ["one two", "three four"], [0, 1])
    fresh = train_anchor(user, base, dataclasses.replace(QUICK, epochs=0), SeededRng(1))
    assert not any(delta(fresh, i).any() for i in range(fresh.num_layers))
    runs = [train_anchor(user, base, QUICK, SeededRng(1)) for _ in range(2)]
    assert runs[0].checksum() == runs[1].checksum() and runs[0].label == "a"


def test_train_anchor_missing_target_names_item():
    base = init_model(SMALL_MODEL, SeededRng(0))
    user = UserRecord("a", (HistoryItem("x y", 1), HistoryItem("z w", None)))
    with pytest.raises(DataError, match="item 1"):
        train_anchor(user, base, QUICK, SeededRng(0))


def test_anchor_fixture_reduces_loss(fixture_config):
    cfg = fixture_config
    spec = dataclasses.replace(cfg.synthetic, history_len=(16, 16), users_per_cluster=1, test_users_per_cluster=0)
    user = generate_corpus(spec)[0]
    assert len(user.history) == 16
    base = init_model(cfg.model, SeededRng(cfg.model_seed))
    log = []
    train_anchor(user, base, cfg.bank.anchor_training, SeededRng(cfg.bank.seed).derive(user.user_id), None, log)
    assert log[-1] <= 0.6 * log[0]
    text = json.dumps({"user_id": user.user_id, "epoch_mean_loss": log}, indent=2) + "\n"
    assert check_fixture("anchor_curve.json", text) == text


def test_every_user_is_an_anchor_when_v_equals_n():
    corpus = [make_user(f"u{i}", [f"topic{i} word{i}", f"topic{i} other"], [0, 1]) for i in range(3)]
    bank = build_bank(corpus, init_model(SMALL_MODEL, SeededRng(0)), small_bank_cfg(3))
    assert sorted(bank.anchor_ids) == ["u0", "u1", "u2"]


def test_fixture_bank_has_one_anchor_per_planted_cluster(fixture_config):
    corpus = [u for u in generate_corpus(fixture_config.synthetic) if not is_heldout_id(u.user_id)]
    base = init_model(SMALL_MODEL, SeededRng(0))
    bank = build_bank(corpus, base, small_bank_cfg(3, kmeans_restarts=fixture_config.bank.kmeans_restarts))
    assert sorted(planted_cluster(a) for a in bank.anchor_ids) == [0, 1, 2]


@pytest.fixture(scope="module")
def small_bank():
    corpus = generate_corpus(SyntheticSpec(n_clusters=2, users_per_cluster=3, test_users_per_cluster=0))
    return corpus, build_bank(corpus, init_model(SMALL_MODEL, SeededRng(0)), small_bank_cfg(2))


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_rebuild_is_bit_identical(tmp_path, small_bank):
    corpus, bank = small_bank
    again = build_bank(corpus, init_model(SMALL_MODEL, SeededRng(0)), small_bank_cfg(2))
    save_bank(bank, tmp_path / "a")
    save_bank(again, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_bank_round_trip(tmp_path, small_bank):
    _, bank = small_bank
    save_bank(bank, tmp_path / "bank")
    back = load_bank(tmp_path / "bank")
    assert back.checksum() == bank.checksum()
    assert back.anchor_ids == bank.anchor_ids and back.config == bank.config


def test_bank_corruption_errors(tmp_path, small_bank):
    _, bank = small_bank
    root = tmp_path / "bank"
    save_bank(bank, root)
    tensor = root / "adapters" / "001" / "layer0.A.mtat"
    tensor.write_bytes(tensor.read_bytes()[:-5])
    with pytest.raises(ChecksumError):
        load_bank(root)
    tensor.unlink()
    with pytest.raises(MissingFileError, match="layer0.A.mtat"):
        load_bank(root)
    save_bank(bank, root)
    mf = root / "manifest.json"
    mf.write_text(mf.read_text().replace('"version": 1', '"version": 2', 1))
    with pytest.raises(VersionMismatchError):
        load_bank(root)
    mf.unlink()
    with pytest.raises(MissingFileError):
        load_bank(root)


def test_bank_config_validation():
    with pytest.raises(ParameterError):
        BankConfig(num_clusters=0)
    with pytest.raises(ParameterError):
        BankConfig(anchor_rank=2)
    assert BankConfig.from_dict(BankConfig().to_dict()) == BankConfig()
