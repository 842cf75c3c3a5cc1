import dataclasses

import numpy as np
import pytest

from mta.errors import DataError, ParameterError
from mta.evalcli.corpus import history_examples, read_corpus, split_users, text_features, write_corpus
from mta.evalcli.synthetic import SyntheticSpec, generate_corpus, held_out_ids, planted_cluster, sample_population
from mta.profiling import HistoryItem, Query, UserRecord, encode_text


def test_zero_noise_users_share_cluster_mappings():
    users = sample_population(SyntheticSpec(user_noise=0.0))
    for k in range(3):
        members = [u for u in users if u.cluster == k]
        for u in members[1:]:
            assert np.array_equal(u.label_weights, members[0].label_weights)
            assert np.array_equal(u.vocab_logits, members[0].vocab_logits)


def test_same_seed_same_corpus_bytes(tmp_path):
    spec = SyntheticSpec(seed=4)
    write_corpus(generate_corpus(spec), tmp_path / "a.jsonl")
    write_corpus(generate_corpus(spec), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() != b""
    write_corpus(generate_corpus(dataclasses.replace(spec, seed=5)), tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_corpus_shape():
    spec = SyntheticSpec(n_clusters=3, users_per_cluster=4, test_users_per_cluster=2, few_shot=8, query_count=5)
    corpus = generate_corpus(spec)
    tests = held_out_ids(corpus)
    assert len(corpus) == 18 and len(tests) == 6
    for u in corpus:
        assert len(u.queries) == 5
        if u.user_id in tests:
            assert len(u.history) == 8
        else:
            assert spec.history_len[0] <= len(u.history) <= spec.history_len[1]
        assert all(0 <= item.target < spec.num_classes for item in u.history)
    assert sorted({planted_cluster(u.user_id) for u in corpus}) == [0, 1, 2]


def test_rating_task_targets_in_range():
    corpus = generate_corpus(SyntheticSpec(task="rating"))
    targets = [item.target for u in corpus for item in u.history]
    assert all(1.0 <= t <= 5.0 and float(t).is_integer() for t in targets)
    assert len(set(targets)) > 1


def test_spec_validation():
    with pytest.raises(ParameterError):
        SyntheticSpec(n_clusters=0)
    with pytest.raises(ParameterError):
        SyntheticSpec(history_len=(5, 2))
    with pytest.raises(ParameterError):
        SyntheticSpec(n_clusters=7, topic_words=8, feature_dim=48)
    with pytest.raises(ParameterError):
        SyntheticSpec.from_dict({"clusters": 3})


def test_corpus_round_trip_and_duplicates(tmp_path):
    corpus = [
        UserRecord("a", (HistoryItem("x y", 1),), (Query(2, text="q"),)),
        UserRecord("b", (HistoryItem("z", None),), (Query(0.5, features=(1.0, 2.0)),)),
    ]
    write_corpus(corpus, tmp_path / "c.jsonl")
    assert read_corpus(tmp_path / "c.jsonl") == corpus
    (tmp_path / "d.jsonl").write_text((tmp_path / "c.jsonl").read_text() * 2)
    with pytest.raises(DataError, match="duplicate"):
        read_corpus(tmp_path / "d.jsonl")
    (tmp_path / "e.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        read_corpus(tmp_path / "e.jsonl")


def test_featurizer_and_split():
    v = text_features("hello world")
    np.testing.assert_allclose(v, encode_text("hello world") * 16.0, atol=0)
    user = UserRecord("a", (HistoryItem("x", 1.5),))
    with pytest.raises(DataError):
        history_examples(user, "classification")
    corpus = generate_corpus(SyntheticSpec())
    bank, test = split_users(corpus, held_out_ids(corpus))
    assert {u.user_id for u in bank}.isdisjoint({u.user_id for u in test})
    with pytest.raises(DataError):
        split_users(corpus, ["nobody"])
