import math
import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wildcode.assets import (
    CATEGORIES,
    AssetEntry,
    AssetIndex,
    DimensionMismatch,
    EmptyIndex,
    cosine_embedding_loss,
)


def random_index(rng, n, dim, n_dup=0):
    idx = AssetIndex(dim)
    embs = rng.normal(size=(n, dim))
    # a few exact duplicates under other ids exercise the tie-break
    for j in range(n_dup):
        embs[n - 1 - j] = embs[j]
    for i, e in enumerate(embs):
        idx.insert(AssetEntry(i // 72 * 7 + 3, CATEGORIES[i % 6], i % 72, e))
    return idx


def brute_force_ranking(idx, q):
    """Exhaustive scan with the cosine written out per entry."""
    qn = math.sqrt(float(q @ q))
    scored = []
    for e in idx:
        sim = float(e.embedding @ q) / (math.sqrt(float(e.embedding @ e.embedding)) * qn)
        scored.append((-sim, e.asset_id, e.yaw_bin))
    return [(a, b) for _, a, b in sorted(scored)]


def test_insert_then_query():
    rng = np.random.default_rng(0)
    idx = random_index(rng, 50, 8)
    e = next(iter(idx))
    top, sim = idx.query(e.embedding, k=1)[0]
    assert top.key == e.key
    assert sim == pytest.approx(1.0)


def test_duplicate_key_replaces():
    idx = AssetIndex(4)
    idx.insert(AssetEntry(1, "bird", 3, np.ones(4)))
    idx.insert(AssetEntry(1, "bird", 3, np.array([1.0, 0, 0, 0])))
    assert len(idx) == 1
    np.testing.assert_array_equal(idx.get(1, 3).embedding, [1, 0, 0, 0])


def test_desk_scale_count():
    idx = AssetIndex(16)
    rng = np.random.default_rng(1)
    for a in range(60):
        for b in range(8):
            idx.insert(AssetEntry(a, CATEGORIES[a // 10], b * 9, rng.normal(size=16)))
    assert len(idx) == 60 * 8 == 480


def test_negated_query():
    idx = AssetIndex(3)
    e = np.array([1.0, 2.0, 3.0])
    idx.insert(AssetEntry(0, "tree", 0, e))
    assert idx.query(-e)[0][1] == pytest.approx(-1.0)


def test_errors():
    idx = AssetIndex(3)
    with pytest.raises(EmptyIndex):
        idx.query(np.ones(3))
    with pytest.raises(DimensionMismatch):
        idx.insert(AssetEntry(0, "tree", 0, np.ones(4)))
    idx.insert(AssetEntry(0, "tree", 0, np.ones(3)))
    with pytest.raises(DimensionMismatch):
        idx.query(np.ones(2))
    with pytest.raises(ValueError):
        idx.query(np.zeros(3))
    with pytest.raises(ValueError):
        idx.query(np.ones(3), k=0)


def test_ranking_matches_brute_force():
    rng = np.random.default_rng(2)
    idx = random_index(rng, 2000, 12, n_dup=20)
    for _ in range(10):
        q = rng.normal(size=12)
        got = [e.key for e, _ in idx.query(q, k=len(idx))]
        assert got == brute_force_ranking(idx, q)


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_query_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    idx = random_index(rng, 100, 6)
    q = rng.normal(size=6)
    a = [e.key for e, _ in idx.query(q, k=10)]
    b = [e.key for e, _ in idx.query(scale * q, k=10)]
    assert a == b


def test_save_load(tmp_path):
    rng = np.random.default_rng(3)
    idx = random_index(rng, 300, 10)
    idx.save(tmp_path / "a.wcae")
    back = AssetIndex.load(tmp_path / "a.wcae")
    assert len(back) == len(idx) and back.dim == 10
    for e in idx:
        f = back.get(*e.key)
        assert f.category == e.category
        np.testing.assert_allclose(f.embedding, e.embedding, rtol=1e-6)
    data = (tmp_path / "a.wcae").read_bytes()
    assert data[:4] == b"WCAE"
    assert len(data) == 16 + 300 * (4 + 1 + 1 + 4 * 10)


def test_concurrent_reads_during_writes():
    rng = np.random.default_rng(4)
    idx = random_index(rng, 200, 8)
    q = rng.normal(size=8)
    errors = []

    def reader():
        try:
            for _ in range(200):
                res = idx.query(q, k=5)
                sims = [s for _, s in res]
                assert sims == sorted(sims, reverse=True)
        except Exception as e:  # noqa: BLE001 - surfaced below
            errors.append(e)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(200):
        idx.insert(AssetEntry(10_000 + i, "bush", 0, rng.normal(size=8)))
    for t in threads:
        t.join()
    assert not errors
    assert len(idx) == 400


def loss_oracle(p, t, lam):
    dot = sum(a * b for a, b in zip(p, t))
    pn = math.sqrt(sum(a * a for a in p))
    tn = math.sqrt(sum(b * b for b in t))
    return (1 - dot / (pn * tn)) + lam * (pn - tn) ** 2


def test_loss_cases():
    t = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    assert float(cosine_embedding_loss(t, t)) == pytest.approx(0.0, abs=1e-15)
    assert float(cosine_embedding_loss(2 * t, t, lam=0.0)) == pytest.approx(0.0, abs=1e-15)
    assert float(cosine_embedding_loss(2 * t, t, lam=0.1)) > 0


def test_loss_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        p, t = rng.normal(size=16), rng.normal(size=16)
        got = float(cosine_embedding_loss(torch.tensor(p), torch.tensor(t), 0.1))
        assert got == pytest.approx(loss_oracle(p, t, 0.1), abs=1e-9)


def cosine_loss_fd_error(p, t, lam=0.1, h=1e-6):
    x = torch.tensor(p, requires_grad=True)
    cosine_embedding_loss(x, torch.tensor(t), lam).backward()
    analytic = x.grad.numpy()
    numeric = np.array([
        (loss_oracle(p + h * e, t, lam) - loss_oracle(p - h * e, t, lam)) / (2 * h) for e in np.eye(len(p))
    ])
    return np.abs(analytic - numeric).max() / max(np.abs(analytic).max(), np.abs(numeric).max())


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(30):
        p, t = rng.normal(size=8), rng.normal(size=8)
        assert cosine_loss_fd_error(p, t) < 1e-4
