import threading

import numpy as np
import pytest
import torch
from conftest import make_model, random_pairs
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from inkmt.data import ParallelCorpus
from inkmt.datastore import ActiveDatastore, Datastore, build, refresh
from inkmt.model import forward_teacher_forced
from inkmt.validation import DatastoreStateError, FormatError, InputError


def store(keys, values=None, **kw):
    keys = np.asarray(keys, dtype=np.float32)
    n = len(keys)
    values = np.arange(n) % 7 if values is None else values
    return Datastore(keys, values, np.stack([np.arange(n), np.zeros(n, int)], 1), **kw)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 12), st.booleans())
def test_exact_search_matches_brute_force(seed, n, k, with_duplicates):
    rng = np.random.default_rng(seed)
    # integer-valued keys make float32 storage exact and create distance ties
    keys = rng.integers(-3, 4, (n, 3)).astype(np.float32)
    if with_duplicates and n > 1:
        keys[n // 2] = keys[0]
    ds = store(keys)
    q = rng.integers(-3, 4, 3).astype(np.float64)
    exclude = int(rng.integers(-1, n))
    ids, dists = ds.search(q[None], k, np.array([exclude]))
    ref_ids, ref_d = oracles.brute_force_knn(keys, q, k, exclude if exclude >= 0 else None)
    m = len(ref_ids)
    assert ids[0, :m].tolist() == ref_ids
    np.testing.assert_allclose(dists[0, :m], ref_d, rtol=1e-12)
    assert (ids[0, m:] == -1).all() and np.isinf(dists[0, m:]).all()


def test_large_store_matches_brute_force():
    rng = np.random.default_rng(5)
    keys = rng.normal(size=(3000, 8)).astype(np.float32)
    ds = store(keys)
    Q = rng.normal(size=(20, 8))
    ids, _ = ds.search(Q, 16)
    for i, q in enumerate(Q):
        assert ids[i].tolist() == oracles.brute_force_knn(keys, q, 16)[0]


def test_query_returns_neighbor_set_without_self():
    keys = np.array([[0, 0], [1, 0], [5, 5]], dtype=np.float32)
    ds = store(keys, values=[10, 11, 12])
    nb = ds.query(np.array([0.0, 0.0]), 2, exclude=(0, 0))
    assert nb.ids.tolist() == [1, 2]
    assert nb.tokens.tolist() == [11, 12]
    np.testing.assert_allclose(nb.distances, [1.0, np.sqrt(50)])
    assert len(ds.query(np.zeros(2), 10)) == 3


def test_ties_broken_by_insertion_order():
    ds = store([[1, 0], [0, 1], [-1, 0], [0, -1]])
    assert ds.search(np.zeros((1, 2)), 4)[0][0].tolist() == [0, 1, 2, 3]


def test_search_errors():
    ds = store([[1, 0]])
    with pytest.raises(InputError):
        ds.search(np.zeros((1, 3)), 1)
    with pytest.raises(InputError):
        ds.search(np.zeros((1, 2)), 0)
    with pytest.raises(InputError):
        store([[np.nan, 0.0]])
    empty = Datastore(np.zeros((0, 2)), [], np.zeros((0, 2)))
    with pytest.raises(DatastoreStateError):
        empty.search(np.zeros((1, 2)), 1)


def test_entries_are_read_only():
    ds = store([[1, 0]])
    with pytest.raises(ValueError):
        ds.keys[0, 0] = 3.0


def test_ivf_search_finds_most_true_neighbors():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(20, 8)) * 5
    keys = (centers[rng.integers(0, 20, 4000)] + rng.normal(size=(4000, 8))).astype(np.float32)
    ds = store(keys, mode="ivf", n_list=32, n_probe=8)
    Q = keys[:50].astype(np.float64) + 0.1
    approx, _ = ds.search(Q, 8)
    exact, _ = ds.search(Q, 8, approximate=False)
    recall = np.mean([len(set(a) & set(e)) / 8 for a, e in zip(approx, exact)])
    assert recall > 0.9


# --- building from a model ------------------------------------------------------------------


@pytest.fixture
def model_and_corpus():
    model = make_model(2, dtype=torch.float32)
    corpus = ParallelCorpus(random_pairs(np.random.default_rng(2), 12))
    return model, corpus


def test_one_entry_per_target_position(model_and_corpus):
    model, corpus = model_and_corpus
    ds = build(model, corpus, batch_size=5)
    assert len(ds) == corpus.n_target_positions()
    assert ds.version == 1
    row = 0
    for s, (src, tgt) in enumerate(corpus):
        h = forward_teacher_forced(model, src, tgt)
        for t, y in enumerate(list(tgt) + [2]):
            assert ds.values[row] == y and tuple(ds.origins[row]) == (s, t)
            assert ds.entry_of((s, t)) == row
            np.testing.assert_allclose(ds.keys[row], h[t], atol=1e-5)
            row += 1
    assert ds.entry_of((99, 0)) == -1


def test_refresh_recomputes_keys_only(model_and_corpus):
    model, corpus = model_and_corpus
    old = build(model, corpus)
    assert refresh(old, model, corpus).same_entries(old)
    model.add_adapters()
    with torch.no_grad():
        for _, p in model.adapter_parameters():
            p.add_(0.1)
    new = refresh(old, model, corpus)
    assert new.version == old.version + 1
    assert np.array_equal(new.values, old.values) and np.array_equal(new.origins, old.origins)
    assert not np.allclose(new.keys, old.keys)
    assert old.keys.flags.writeable is False


def test_refresh_rejects_a_different_corpus(model_and_corpus):
    model, corpus = model_and_corpus
    old = build(model, corpus)
    with pytest.raises(DatastoreStateError):
        refresh(old, model, ParallelCorpus(corpus.pairs[:-1]))
    swapped = ParallelCorpus([(s, [4] * len(t)) for s, t in corpus])
    with pytest.raises(DatastoreStateError):
        refresh(old, model, swapped)


def test_build_from_empty_corpus():
    with pytest.raises(InputError):
        build(make_model(), ParallelCorpus([]))


# --- persistence and publication -----------------------------------------------------------------


def test_save_load_round_trip(tmp_path, model_and_corpus):
    ds = build(*model_and_corpus)
    ds.save(tmp_path / "d.bin")
    loaded = Datastore.load(tmp_path / "d.bin")
    assert loaded.same_entries(ds) and loaded.version == ds.version


def test_load_rejects_damaged_files(tmp_path):
    store([[1, 2]]).save(tmp_path / "d.bin")
    blob = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-1])
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + blob[4:])
    for name in ("short.bin", "magic.bin"):
        with pytest.raises(FormatError):
            Datastore.load(tmp_path / name)


def test_publication_is_monotonic_and_atomic():
    v1 = store([[0, 0]], version=1)
    handle = ActiveDatastore(v1)
    with pytest.raises(DatastoreStateError):
        handle.publish(store([[1, 1]], version=1))
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            cur = handle.current
            seen.append((cur.version, float(cur.keys[0, 0])))

    t = threading.Thread(target=reader)
    t.start()
    for v in range(2, 50):
        handle.publish(store([[v, v]], version=v))
    stop.set()
    t.join()
    # every observed snapshot is internally consistent
    assert all(version == key or (version == 1 and key == 0) for version, key in seen)
    assert handle.current.version == 49
