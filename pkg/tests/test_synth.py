import json
import math

import numpy as np
import pytest

from dpselft.accountant import PrivacyLedger
from dpselft.nn import Dataset
from dpselft.synth import (
    CandidatePool,
    Encoder,
    GeneratorConfig,
    VoteHistogram,
    build_synthetic_dataset,
    export_synthetic,
    generate_candidates,
    import_synthetic,
    label,
    load_dataset_csv,
    load_pool_csv,
    privatize,
    save_dataset_csv,
    save_pool_csv,
    select_topk,
    split_indices,
    vote,
)


def brute_force_stage(private, pool, k, K):
    """Exhaustive sigma=0 pipeline: double-loop nearest neighbour, counts, top-k, majority."""
    m = len(pool)
    counts = [[0] * K for _ in range(m)]
    for x, c in zip(private.X, private.y):
        best, best_d = 0, math.inf
        for j, p in enumerate(pool.X):
            d = sum((a - b) ** 2 for a, b in zip(x, p))
            if d < best_d:
                best, best_d = j, d
        counts[best][int(c)] += 1
    totals = [sum(r) for r in counts]
    order = sorted(range(m), key=lambda j: (-totals[j], j))[:k]
    S = sorted(order)
    labels = {j: max(range(K), key=lambda c: (counts[j][c], -c)) for j in S}
    return counts, S, labels


def random_instance(rng):
    n = int(rng.integers(1, 51))
    m = int(rng.integers(1, 21))
    K = int(rng.integers(2, 4))
    dim = int(rng.integers(1, 4))
    # coarse integer grid makes exact distance ties common
    private = Dataset(rng.integers(-3, 4, size=(n, dim)).astype(float), rng.integers(0, K, size=n))
    pool = CandidatePool(rng.integers(-3, 4, size=(m, dim)).astype(float))
    return private, pool, K, int(rng.integers(1, m + 1))


# --- candidates --------------------------------------------------------------


def test_pool_size_with_600_seeds():
    cfg = GeneratorConfig(means=[[0.0, 0.0]], scales=[1.0], n_seed=600, mu=3)
    assert len(generate_candidates(cfg, np.random.default_rng(0))) == 2400 == cfg.pool_size


def test_mu_zero_gives_seed_samples():
    cfg0 = GeneratorConfig(means=[[0.0], [5.0]], scales=[1.0, 1.0], n_seed=10, mu=0)
    cfg3 = GeneratorConfig(means=[[0.0], [5.0]], scales=[1.0, 1.0], n_seed=10, mu=3)
    a = generate_candidates(cfg0, np.random.default_rng(3))
    b = generate_candidates(cfg3, np.random.default_rng(3))
    np.testing.assert_array_equal(a.X, b.X[::4])


def test_generation_deterministic():
    cfg = GeneratorConfig(means=[[0.0, 1.0]], scales=[0.5], n_seed=20)
    a = generate_candidates(cfg, np.random.default_rng(1))
    b = generate_candidates(cfg, np.random.default_rng(1))
    assert a.X.tobytes() == b.X.tobytes()


def test_empty_mixture_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(means=[], scales=[])


def test_pool_import(tmp_path):
    pool = CandidatePool(np.arange(6.0).reshape(3, 2))
    save_pool_csv(pool, tmp_path / "p.csv")
    cfg = GeneratorConfig(means=[], scales=[], import_path=str(tmp_path / "p.csv"))
    got = generate_candidates(cfg, np.random.default_rng(0))
    assert got.provenance == "imported"
    np.testing.assert_array_equal(got.X, pool.X)


# --- voting --------------------------------------------------------------------


def test_vote_nearest_by_distance():
    private = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]))
    pool = CandidatePool(np.array([[0.1], [0.9], [5.0]]))
    h = vote(private, pool, Encoder(), n_classes=2)
    np.testing.assert_array_equal(h.counts, [[1, 0], [0, 1], [0, 0]])


def test_vote_tie_goes_to_smaller_index():
    private = Dataset(np.array([[0.5]]), np.array([0]))
    h = vote(private, CandidatePool(np.array([[0.0], [1.0]])), Encoder(), n_classes=1)
    np.testing.assert_array_equal(h.counts, [[1], [0]])


def test_vote_matches_brute_force():
    rng = np.random.default_rng(11)
    private = Dataset(rng.standard_normal((50, 3)), rng.integers(0, 3, 50))
    pool = CandidatePool(rng.standard_normal((20, 3)))
    counts, _, _ = brute_force_stage(private, pool, 1, 3)
    h = vote(private, pool, Encoder(), n_classes=3)
    np.testing.assert_array_equal(h.counts, counts)
    assert h.counts.sum() == 50
    np.testing.assert_array_equal(h.marginal, h.counts.sum(axis=1))


def test_vote_cosine():
    private = Dataset(np.array([[1.0, 0.1], [0.0, 2.0]]), np.array([0, 1]))
    pool = CandidatePool(np.array([[10.0, 0.0], [0.0, 0.1]]))
    h = vote(private, pool, Encoder(), metric="cosine", n_classes=2)
    np.testing.assert_array_equal(h.counts, [[1, 0], [0, 1]])


def test_vote_dimension_mismatch():
    with pytest.raises(ValueError):
        vote(Dataset(np.zeros((2, 3)), np.zeros(2)), CandidatePool(np.zeros((2, 2))), Encoder())


def test_projection_encoder_deterministic():
    X = np.random.default_rng(0).standard_normal((5, 8))
    a = Encoder("projection", seed=4, out_dim=3).encode(X)
    b = Encoder("projection", seed=4, out_dim=3).encode(X)
    assert a.shape == (5, 3) and a.tobytes() == b.tobytes()


def test_neighboring_datasets_change_one_cell_by_one():
    rng = np.random.default_rng(5)
    pool = CandidatePool(rng.standard_normal((15, 2)))
    for _ in range(200):
        n = int(rng.integers(1, 40))
        private = Dataset(rng.standard_normal((n, 2)), rng.integers(0, 3, n))
        drop = int(rng.integers(n))
        neighbor = private.subset([i for i in range(n) if i != drop])
        d = vote(private, pool, Encoder(), n_classes=3).counts - vote(neighbor, pool, Encoder(), n_classes=3).counts
        assert np.abs(d).sum() == 1 and d.max() == 1


# --- privatize / select / label ---------------------------------------------------


def test_privatize_zero_noise_is_exact():
    h = VoteHistogram(np.array([[3, 1], [0, 2]]))
    p = privatize(h, 0.0, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(p.noisy_counts, h.counts)
    np.testing.assert_array_equal(p.noisy_marginal, h.marginal)


def test_privatize_noise_moments():
    h = VoteHistogram(np.zeros((100_000, 1), dtype=np.int64))
    p = privatize(h, 1.0, 1.0, np.random.default_rng(9))
    cells = p.noisy_counts[:, 0]
    assert abs(cells.mean()) < 4 / math.sqrt(cells.size)
    assert abs(cells.var(ddof=1) - 1) < 0.05


def test_privatize_rejects_negative_sigma():
    with pytest.raises(ValueError):
        privatize(VoteHistogram(np.zeros((2, 2), dtype=int)), -1.0, 1.0, np.random.default_rng(0))


def test_two_release_variant():
    h = VoteHistogram(np.array([[3, 1], [0, 2]]))
    p = privatize(h, 0.0, 1.0, np.random.default_rng(0), joint=False)
    np.testing.assert_array_equal(p.noisy_marginal, [4, 2])


def _noisy(marginal, cells=None):
    marginal = np.asarray(marginal, dtype=float)
    cells = np.zeros((marginal.size, 1)) if cells is None else np.asarray(cells, dtype=float)
    return VoteHistogram(np.zeros(cells.shape, dtype=int), cells, marginal, 0.0, 0.0)


def test_topk_basic_and_ties():
    assert select_topk(_noisy([3, 1, 2]), 2).tolist() == [0, 2]
    assert select_topk(_noisy([3, 1, 2]), 3).tolist() == [0, 1, 2]
    assert select_topk(_noisy([2, 2, 1]), 1).tolist() == [0]
    with pytest.raises(ValueError):
        select_topk(_noisy([1, 2]), 3)


def test_label_majority_and_ties():
    h = _noisy([6, 4], [[5, 1], [2, 2]])
    assert label(h, [0, 1]) == {0: 0, 1: 0}


def test_label_robust_to_unit_noise():
    h = VoteHistogram(np.tile(np.array([[20, 0]]), (10_000, 1)))
    p = privatize(h, 1.0, 1.0, np.random.default_rng(1))
    labels = label(p, range(10_000))
    assert np.mean([v == 0 for v in labels.values()]) >= 0.999


# --- full stage ----------------------------------------------------------------------


def test_full_stage_matches_brute_force_without_noise():
    rng = np.random.default_rng(2025)
    for _ in range(100):
        private, pool, K, k = random_instance(rng)
        _, S, labels = brute_force_stage(private, pool, k, K)
        syn = build_synthetic_dataset(private, pool, Encoder(), math.inf, 1e-5, k, 0, rng, n_classes=K)
        assert syn.selected.tolist() == S
        assert syn.y.tolist() == [labels[j] for j in S]
        np.testing.assert_array_equal(syn.X, pool.X[S])


def test_default_stage_records_one_entry():
    rng = np.random.default_rng(0)
    private = Dataset(rng.standard_normal((200, 2)), rng.integers(0, 2, 200))
    pool = CandidatePool(rng.standard_normal((30, 2)))
    led = PrivacyLedger()
    syn = build_synthetic_dataset(private, pool, Encoder(), 0.3, 5e-6, 20, 1, rng, ledger=led, n_classes=2)
    assert led.stages() == ["synthetic"]
    assert led.total_epsilon <= 0.3
    assert syn.sigma_hist > 0 and len(syn) == 20


def test_two_release_stage_spends_same_budget():
    rng = np.random.default_rng(0)
    private = Dataset(rng.standard_normal((50, 2)), rng.integers(0, 2, 50))
    pool = CandidatePool(rng.standard_normal((10, 2)))
    led = PrivacyLedger()
    syn = build_synthetic_dataset(private, pool, Encoder(), 0.3, 5e-6, 5, 1, rng, ledger=led, joint=False, n_classes=2)
    assert led.entries[0].events[0].count == 2
    assert 0.299 <= led.total_epsilon <= 0.3
    assert syn.sigma_hist > 17.4  # two releases need more noise than one


def test_toy_stage_infinite_budget():
    private = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]))
    pool = CandidatePool(np.array([[0.1], [0.9], [5.0]]))
    led = PrivacyLedger()
    syn = build_synthetic_dataset(private, pool, Encoder(), math.inf, 1e-5, 2, 0, np.random.default_rng(0), ledger=led, n_classes=2)
    assert syn.selected.tolist() == [0, 1] and syn.y.tolist() == [0, 1]
    assert led.entries == []


def test_split_seven_three():
    tr, va = split_indices(10, 0.7, np.random.default_rng(0))
    assert len(tr) == 7 and len(va) == 3
    assert set(tr).isdisjoint(va) and set(tr) | set(va) == set(range(10))


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    data = Dataset(rng.standard_normal((6, 3)), rng.integers(0, 3, 6))
    save_dataset_csv(data, tmp_path / "d.csv")
    back = load_dataset_csv(tmp_path / "d.csv")
    assert back.X.tobytes() == data.X.tobytes() and back.y.tolist() == data.y.tolist()
    pool = CandidatePool(rng.standard_normal((4, 3)))
    save_pool_csv(pool, tmp_path / "p.csv")
    assert load_pool_csv(tmp_path / "p.csv").X.tobytes() == pool.X.tobytes()


def test_synthetic_export_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    private = Dataset(rng.standard_normal((100, 2)), rng.integers(0, 2, 100))
    pool = CandidatePool(rng.standard_normal((20, 2)))
    syn = build_synthetic_dataset(private, pool, Encoder(), 0.3, 5e-6, 10, 1, rng, n_classes=2)
    sidecar = export_synthetic(syn, tmp_path / "syn.csv")
    meta = json.loads(sidecar.read_text())
    assert meta["ledger_entry"]["stage"] == "synthetic"
    back = import_synthetic(tmp_path / "syn.csv")
    assert back.X.tobytes() == syn.X.tobytes()
    assert back.train_idx.tolist() == syn.train_idx.tolist()
    assert back.sigma_hist == syn.sigma_hist
