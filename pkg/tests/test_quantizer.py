import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unger.corpus import CorpusFormatError, EmbeddingMatrix
from unger.quantizer import (
    UnicodeTable,
    fit,
    hierarchical_kmeans,
    kmeans,
    load_codebooks,
    load_table,
    quantization_error,
    random_assignment,
    save_codebooks,
    save_table,
    sq_distances,
)


def oracle_lloyd(x, init):
    # plain Lloyd loop, independent of the package implementation
    c = init.copy()
    labels = None
    for _ in range(100):
        d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        new = d.argmin(1)
        if labels is not None and (new == labels).all():
            break
        labels = new
        c = np.array([x[labels == k].mean(0) if (labels == k).any() else c[k] for k in range(len(c))])
    return labels, ((x - c[labels]) ** 2).sum()


def relabel_by_first_member(labels):
    order = {}
    for lab in labels:
        order.setdefault(lab, len(order))
    return np.array([order[lab] for lab in labels])


def brute_force_codes(x, K, L):
    """Best-objective Lloyd run over every K-subset of points as the initial centroids."""
    x = np.asarray(x, dtype=np.float64)
    codes = []
    for _ in range(L):
        best = None
        for combo in itertools.combinations(range(len(x)), K):
            labels, obj = oracle_lloyd(x, x[list(combo)])
            if best is None or obj < best[1] - 1e-12:
                best = (labels, obj)
        labels = best[0]
        cent = np.array([x[labels == k].mean(0) for k in np.unique(labels)])
        labels = np.searchsorted(np.unique(labels), labels)
        x = x - cent[labels]
        codes.append(relabel_by_first_member(labels))
    return np.stack(codes, 1)


PAIRS_OF_PAIRS = np.array([
    [0.0, 0.0], [0.0, 0.1], [1.0, 0.0], [1.0, 0.1],
    [10.0, 10.0], [10.0, 10.1], [11.0, 10.0], [11.0, 10.1],
])


def test_single_item_two_levels():
    x = np.array([[0.3, -1.2, 5.0]])
    fitted = hierarchical_kmeans(x, K=5, L=2, seed=0)
    assert fitted.codes.tolist() == [[0, 0]]
    assert (fitted.residuals[-1] == 0).all()
    books, table = fit(x, K=5, L=2)
    assert table.codes == [(0, 0)]
    assert quantization_error(x, books, table) == 0.0


def test_pairs_of_pairs_match_brute_force_oracle():
    want = brute_force_codes(PAIRS_OF_PAIRS, K=2, L=2)
    for seed in range(5):
        got = hierarchical_kmeans(PAIRS_OF_PAIRS, K=2, L=2, seed=seed).codes
        np.testing.assert_array_equal(got, want)
    # the two levels split clusters, then left/right pairs
    assert want[:, 0].tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert want[:, 1].tolist() == [0, 0, 1, 1, 0, 0, 1, 1]


def test_thirty_points_match_brute_force_oracle():
    # three clusters, each made of the same three sub-clusters, so both levels are well separated
    rng = np.random.default_rng(7)
    centers = rng.normal(scale=20, size=(3, 4))
    offsets = rng.normal(scale=3, size=(3, 4))
    sub = np.tile([0, 0, 0, 0, 1, 1, 1, 2, 2, 2], 3)
    x = np.repeat(centers, 10, axis=0) + offsets[sub] + rng.normal(scale=0.1, size=(30, 4))
    want = brute_force_codes(x, K=3, L=2)
    got = hierarchical_kmeans(x, K=3, L=2, seed=1).codes
    np.testing.assert_array_equal(got, want)


def test_identical_rows_get_disambiguated():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    x[4] = x[1]
    _, table = fit(x, K=2, L=2, seed=0)
    assert table.codes[1][:2] == table.codes[4][:2]
    assert table.codes[1] != table.codes[4]
    # colliding groups are numbered in ascending item order
    assert table.codes[1][2] < table.codes[4][2]
    assert table.has_disambiguation


def test_more_clusters_than_items_is_allowed():
    x = np.random.default_rng(1).normal(size=(3, 2))
    books, table = fit(x, K=8, L=2, seed=0)
    assert len(books.centroids[0]) == 3
    assert all(c < 8 for code in table.codes for c in code)


def test_quantization_error_matches_recomputation():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 8))
    books, table = fit(x, K=4, L=2, seed=3)
    codes = np.array([c[:2] for c in table.codes])
    direct = np.mean([np.sum((x[i] - books.centroids[0][codes[i, 0]] - books.centroids[1][codes[i, 1]]) ** 2)
                      for i in range(100)])
    assert quantization_error(x, books, table) == pytest.approx(direct, abs=1e-5)


def test_quantization_error_width_mismatch():
    x = np.random.default_rng(0).normal(size=(10, 4))
    books, table = fit(x, K=2, L=1)
    with pytest.raises(ValueError):
        quantization_error(x[:, :3], books, table)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 40))
def test_error_non_increasing_in_depth(seed, K, n):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    errors = [quantization_error(x, *fit(x, K=K, L=L, seed=seed)) for L in (1, 2, 3)]
    assert errors[1] <= errors[0] + 1e-12
    assert errors[2] <= errors[1] + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 4))
def test_reconstruction_and_assignment_properties(seed, K, L):
    x = np.random.default_rng(seed).normal(size=(40, 5)).astype(np.float32)
    fitted = hierarchical_kmeans(x, K, L, seed)
    recon = fitted.codebooks.reconstruct(fitted.codes)
    np.testing.assert_allclose(x - recon, fitted.residuals[-1], atol=1e-5)
    for l in range(L):
        cents = fitted.codebooks.centroids[l]
        assert len(cents) <= K
        d = sq_distances(fitted.residuals[l], cents)
        np.testing.assert_array_equal(fitted.codes[:, l], d.argmin(1))
    for objs in fitted.objectives:
        assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))


def test_lloyd_objective_monotone_on_hard_instance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(500, 2))
    res = kmeans(x, 16, rng)
    assert len(res.objectives) > 2
    assert all(b <= a + 1e-9 for a, b in zip(res.objectives, res.objectives[1:]))
    assert res.n_iter <= 25


def test_trie_reaches_exactly_each_item():
    x = np.random.default_rng(2).normal(size=(60, 4))
    x[10] = x[20] = x[30]
    _, table = fit(x, K=3, L=2, seed=2)
    leaves = []
    for i, code in enumerate(table.codes):
        prefix = ()
        for c in code:
            assert c in table.allowed_next(prefix)
            prefix += (c,)
        assert table.item_of(prefix) == i
        assert len(table.allowed_next(prefix)) == 0
        leaves.append(table.item_of(prefix))
    assert sorted(leaves) == list(range(60))
    assert sorted(table.items_under(())) == list(range(60))
    for c in table.allowed_next(()):
        assert table.items_under((c,)) == [i for i, code in enumerate(table.codes) if code[0] == c]


def test_fit_is_deterministic():
    x = np.random.default_rng(4).normal(size=(50, 6))
    a, ta = fit(x, K=4, L=3, seed=11)
    b, tb = fit(x, K=4, L=3, seed=11)
    assert ta == tb
    assert all((p == q).all() for p, q in zip(a.centroids, b.centroids))


# -- random assignment -------------------------------------------------------------


def test_random_assignment_deterministic():
    assert random_assignment(100, 4, 3, seed=5) == random_assignment(100, 4, 3, seed=5)
    assert random_assignment(100, 4, 3, seed=5) != random_assignment(100, 4, 3, seed=6)


def test_exhaustive_assignment_is_bijective():
    table = random_assignment(27, 3, 3, seed=1, exhaustive=True)
    assert not table.has_disambiguation
    assert len(set(table.codes)) == 27
    assert set(table.codes) == set(itertools.product(range(3), repeat=3))
    with pytest.raises(ValueError):
        random_assignment(28, 3, 3, exhaustive=True)


def test_random_level_one_marginals_within_binomial_bound():
    n, K = 100_000, 8
    table = random_assignment(n, K, 2, seed=9)
    counts = np.bincount(table.code_matrix()[:, 0], minlength=K)
    sigma = np.sqrt(n * (1 / K) * (1 - 1 / K))
    assert (np.abs(counts - n / K) <= 3 * sigma).all()
    assert table.has_disambiguation  # 10^5 items in 64 codes must collide


# -- persistence -------------------------------------------------------------------


def test_table_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(30, 3))
    x[3] = x[7]
    _, table = fit(EmbeddingMatrix(x, [f"t{i}" for i in range(30)]), K=3, L=2)
    save_table(tmp_path / "codes.tsv", table)
    back = load_table(tmp_path / "codes.tsv", levels=2)
    assert back == table
    assert back.tokens[3] == "t3"


def test_hand_written_table(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("apple\t0 1\npear\t1 0\n", encoding="utf-8")
    table = load_table(path)
    assert table.levels == 2 and table.K == 2
    assert table.allowed_next(()).tolist() == [0, 1]
    assert table.allowed_next((0,)).tolist() == [1]
    assert table.item_of((1, 0)) == 1
    assert table.item_of((1, 1)) is None
    assert table.tokens == ["apple", "pear"]


def test_duplicate_full_code_rejected(tmp_path):
    path = tmp_path / "dup.tsv"
    path.write_text("a\t0 1\nb\t0 1\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError, match="duplicates line 1"):
        load_table(path)
    with pytest.raises(ValueError):
        UnicodeTable([(0, 1), (0, 1)], 2, 2)


def test_prefix_clash_rejected():
    with pytest.raises(ValueError, match="prefix"):
        UnicodeTable([(0, 1), (0, 1, 0)], 2, 2)


def test_codebooks_roundtrip(tmp_path):
    x = np.random.default_rng(1).normal(size=(40, 5))
    books, table = fit(x, K=4, L=3, seed=7)
    save_codebooks(tmp_path / "cb", books)
    back = load_codebooks(tmp_path / "cb")
    assert (back.K, back.levels, back.dim, back.seed) == (4, 3, 5, 7)
    for a, b in zip(books.centroids, back.centroids):
        np.testing.assert_allclose(a, b, rtol=1e-6)
    assert quantization_error(x, back, table) == pytest.approx(quantization_error(x, books, table), rel=1e-5)
