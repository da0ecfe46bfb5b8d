import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from nsprec.config import RetrievalConfig
from nsprec.data import Event, HeldOutQuery, split_holdout
from nsprec.loss import sample_logits
from nsprec.model import build_model
from nsprec.retrieval import (ItemIndex, NearlineCache, RetrievalError, build_index, evaluate, hit_rate_at_k,
                              linear_scan_topk, pool_rows, retrieve_topk, user_vectors)

from conftest import make_session, tiny_model_config


@pytest.fixture(scope="module")
def tiny_model(tiny_vocab):
    return build_model(tiny_model_config(), tiny_vocab, 0)


def _index(ids, rows, mode="exact"):
    return ItemIndex(tuple(ids), np.asarray(rows, dtype=np.float64), mode)


# -- top-k ------------------------------------------------------------------


def test_hand_example_k1():
    index = _index(["a", "b"], [[2.0, 0.0], [1.0, 5.0]])
    res = retrieve_topk(np.array([1.0, 0.0]), index, 1)
    assert res.items == ("a",) and res.scores.tolist() == [2.0]


def test_k_equal_pool_returns_everything():
    index = _index(["a", "b", "c"], [[1.0], [3.0], [2.0]])
    assert retrieve_topk(np.array([1.0]), index, 3).items == ("b", "c", "a")


def test_k_above_pool_rejected():
    with pytest.raises(RetrievalError):
        retrieve_topk(np.array([1.0]), _index(["a"], [[1.0]]), 2)


def test_ties_broken_by_id():
    index = _index(["a", "b", "c", "d"], [[1.0], [2.0], [2.0], [1.0]])
    assert retrieve_topk(np.array([1.0]), index, 3).items == ("b", "c", "a")


@given(st.integers(0, 10 ** 6))
def test_exact_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    ids = [f"i{j:03d}" for j in range(50)]
    # integer-valued rows create plenty of exact ties
    rows = rng.integers(-2, 3, size=(50, 3)).astype(float)
    index = _index(ids, rows)
    q = rng.integers(-2, 3, size=3).astype(float)
    k = int(rng.integers(1, 51))
    assert list(retrieve_topk(q, index, k).items) == linear_scan_topk(q, ids, rows, k)


def test_exact_matches_linear_scan_on_model(tiny_model, tiny_vocab):
    index = build_index(tiny_model, tiny_vocab)
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.normal(size=tiny_model.cfg.dim)
        assert list(retrieve_topk(q, index, 10).items) == linear_scan_topk(q, index.item_ids, index.rows, 10)


def test_approximate_stays_in_pool(tiny_model, tiny_vocab):
    cfg = RetrievalConfig(mode="approximate", clusters=6, probes=2)
    index = build_index(tiny_model, tiny_vocab, cfg, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        items = retrieve_topk(rng.normal(size=tiny_model.cfg.dim), index, 25).items
        assert len(items) == 25 == len(set(items)) and set(items) <= set(index.item_ids)


# -- pool -------------------------------------------------------------------


def test_pool_and_rebuild(tiny_model, tiny_vocab):
    rows = np.array([1, 2, 3])
    index = build_index(tiny_model, tiny_vocab, rows=rows)
    assert index.size == 3 and index.item_ids == tuple(tiny_vocab.item_ids[:3])
    model = build_model(tiny_model_config(), tiny_vocab, 0)
    with torch.no_grad():
        model.item_table[1] += 1.0
    assert not np.array_equal(build_index(model, tiny_vocab, rows=rows).rows, index.rows)


def test_pool_threshold(tiny_vocab):
    counts = tiny_vocab.exposure_counts
    rows = pool_rows(tiny_vocab, 2)
    assert all(counts[r] >= 2 for r in rows)
    assert len(rows) == int((counts[1:] >= 2).sum())


def test_empty_pool_rejected(tiny_model, tiny_vocab):
    with pytest.raises(RetrievalError):
        build_index(tiny_model, tiny_vocab, rows=np.array([], dtype=int))


def test_train_serve_score_consistency(tiny_model, tiny_vocab, tiny_dataset):
    """Retrieval scores equal the training logits for the same context and item."""
    seq = next(iter(tiny_dataset.users.values()))
    ctx = user_vectors(tiny_model, [seq.sessions[:-1]], ["GUL"], [seq.sessions[-1].start_time])[0]
    index = build_index(tiny_model, tiny_vocab)
    res = retrieve_topk(ctx, index, 5)
    rows = torch.as_tensor([tiny_vocab.item_index(i) for i in res.items])
    with torch.no_grad():
        logits = sample_logits(torch.as_tensor(ctx), tiny_model.item_embeddings(rows).double())
    assert np.allclose(logits.numpy(), res.scores, atol=1e-12)


# -- hit rate ---------------------------------------------------------------


def test_hit_rate_examples():
    assert hit_rate_at_k({"u": ["a", "x", "y"]}, {"u": {"a", "b"}}, 3) == 0.5
    assert hit_rate_at_k({"u": ["b", "a", "y"]}, {"u": {"a", "b"}}, 3) == 1.0


def test_hit_rate_no_evaluable_user():
    with pytest.raises(RetrievalError):
        hit_rate_at_k({"u": ["a"]}, {"u": set()}, 1)


def test_hit_rate_random_baseline():
    rng = np.random.default_rng(0)
    items = [f"i{j}" for j in range(2000)]
    results, truth = {}, {}
    for u in range(2000):
        results[u] = list(rng.permutation(items)[:100])
        truth[u] = {items[int(rng.integers(2000))]}
    assert abs(hit_rate_at_k(results, truth, 100) - 0.05) <= 0.01


@given(st.integers(0, 10 ** 6))
def test_hit_rate_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    items = [f"i{j}" for j in range(30)]
    results = {u: list(rng.permutation(items)) for u in range(5)}
    truth = {u: set(rng.choice(items, size=3, replace=False)) for u in range(5)}
    values = [hit_rate_at_k(results, truth, k) for k in range(1, 31)]
    assert all(a <= b for a, b in zip(values, values[1:])) and values[-1] == 1.0


def test_evaluate_single_item_pool(tiny_model, tiny_vocab):
    item = tiny_vocab.item_ids[0]
    other = tiny_vocab.item_ids[1]
    q = HeldOutQuery("u", (make_session("s0", [other], [other], start=100),),
                     make_session("s1", [item, other], [item], start=200))
    index = build_index(tiny_model, tiny_vocab, rows=np.array([1]))
    report = evaluate(tiny_model, [q], RetrievalConfig(ks=(1, 5)), index=index)
    assert report.hr(1) == 1.0 and report.skipped_ks == (5,)


def test_evaluate_report(tiny_model, tiny_dataset):
    train, queries = split_holdout(tiny_dataset)
    report = evaluate(tiny_model, queries, RetrievalConfig(ks=(1, 5, 20)))
    assert [report.hr(k) for k in (1, 5, 20)] == sorted(report.hr(k) for k in (1, 5, 20))
    header = report.to_csv().splitlines()[0]
    assert header == "scenario,K,hit_rate,users"
    assert report.users["all"] == len({q.user_id for q in queries if q.target.clicked})


# -- nearline ---------------------------------------------------------------


def _events(user, session, items, t0):
    return [Event(user, t0 + j, "GUL", session, item, "exposure") for j, item in enumerate(items)]


def test_nearline_refresh_and_fetch(tiny_model, tiny_vocab, tmp_path):
    index = build_index(tiny_model, tiny_vocab)
    cache = NearlineCache(tiny_model, index, k=5)
    items = tiny_vocab.item_ids
    touched = cache.refresh(_events("u1", "s1", items[:3], 100))
    assert touched == {"u1"} and cache.forward_calls == 1
    first = cache.fetch("u1")
    assert len(first.items) == 5

    # another user's events leave u1 alone
    cache.refresh(_events("u2", "s2", items[3:6], 200))
    assert cache.fetch("u1") is first

    # fetch never runs the model; misses are counted
    calls = cache.forward_calls
    assert cache.fetch("nobody") is None
    assert cache.forward_calls == calls and cache.misses == 1 and cache.hits == 2

    # replaying the same events is idempotent
    before = cache.fetch("u1")
    cache.refresh(_events("u1", "s1", items[:3], 100))
    after = cache.fetch("u1")
    assert after.items == before.items and np.array_equal(after.scores, before.scores)

    cache.dump(tmp_path / "cache.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "cache.jsonl").read_text().splitlines()]
    assert [x["user_id"] for x in lines] == ["u1", "u2"]
    assert set(lines[0]) == {"user_id", "items", "scores"} and len(lines[0]["items"]) == 5


def test_nearline_empty_batch(tiny_model, tiny_vocab):
    cache = NearlineCache(tiny_model, build_index(tiny_model, tiny_vocab), k=5)
    assert cache.refresh([]) == set() and cache.forward_calls == 0
