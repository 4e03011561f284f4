import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unger.corpus import EmbeddingMatrix, SyntheticSpec, generate_synthetic
from unger.evalkit import (
    MetricReport,
    concat_baseline,
    dominance_similarity,
    evaluate,
    ndcg_at_k,
    pca,
    popularity_ranking,
    recall_at_k,
    similarity_profile,
)
from unger.inference import RankedList


def brute_force_scores(lists, truth, k):
    # written against the textbook definitions, one user at a time
    rec, nd = 0.0, 0.0
    for lst, t in zip(lists, truth):
        for pos in range(min(k, len(lst))):
            if lst[pos] == t:
                rec += 1.0
                nd += 1.0 / math.log2(pos + 2)
                break
    return rec / len(truth), nd / len(truth)


def test_recall_direct_counts():
    truth = [7, 8, 9]
    ranked = [[7] + list(range(20, 40)), list(range(20, 25)) + [8], list(range(20, 32)) + [9]]
    assert recall_at_k(ranked, truth, 10) == pytest.approx(2 / 3)
    assert recall_at_k([[1]], [1], 10) == 1.0
    assert recall_at_k([[2, 3]], [1], 10) == 0.0


def test_ndcg_analytic_cases():
    assert ndcg_at_k([[5, 1, 2]], [5], 10) == 1.0
    assert ndcg_at_k([[1, 2, 5]], [5], 10) == 0.5
    assert ndcg_at_k([[1, 2, 3]], [5], 10) == 0.0


def test_missing_list_is_a_miss(caplog):
    assert recall_at_k({0: [1]}, [1, 2], 5) == 0.5
    assert "no ranked list" in caplog.text
    assert recall_at_k([[1], None], [1, 2], 5) == 0.5


def test_accepts_ranked_lists():
    ranked = [RankedList([3, 4], [-0.1, -0.2])]
    assert recall_at_k(ranked, [4], 2) == 1.0
    assert ndcg_at_k(ranked, [4], 2) == pytest.approx(1 / math.log2(3))


def test_invalid_k():
    with pytest.raises(ValueError):
        recall_at_k([[1]], [1], 0)


def test_metrics_match_brute_force_on_random_users():
    rng = np.random.default_rng(0)
    truth = rng.integers(50, size=200)
    lists = [rng.permutation(50)[: rng.integers(1, 40)].tolist() for _ in range(200)]
    for k in (1, 5, 10, 20, 50):
        rec, nd = brute_force_scores(lists, truth, k)
        assert abs(recall_at_k(lists, truth, k) - rec) <= 1e-12
        assert abs(ndcg_at_k(lists, truth, k) - nd) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_non_decreasing_in_k(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(30, size=20)
    lists = [rng.permutation(30)[:25].tolist() for _ in range(20)]
    rec = [recall_at_k(lists, truth, k) for k in range(1, 30)]
    nd = [ndcg_at_k(lists, truth, k) for k in range(1, 30)]
    assert all(b >= a for a, b in zip(rec, rec[1:]))
    assert all(b >= a for a, b in zip(nd, nd[1:]))


def test_report_json_and_text():
    report = evaluate([[1, 2], [3]], [2, 4], ks=(10, 20))
    assert isinstance(report, MetricReport)
    assert '"10": 0.5' in report.to_json()
    text = report.to_text()
    assert "Recall" in text and "@20" in text


def test_popularity_ranking_ties_to_lower_index():
    corpus, _ = generate_synthetic(SyntheticSpec(n_categories=2, items_per_category=3, n_users=40, seed=1))
    counts = corpus.item_counts()
    top = popularity_ranking(corpus, 6)
    assert sorted(top) == list(range(6))
    for a, b in zip(top, top[1:]):
        assert counts[a] > counts[b] or (counts[a] == counts[b] and a < b)


# -- dominance ----------------------------------------------------------------------


def random_views(seed, n=60):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 12)), rng.normal(size=(n, 5)), rng.normal(size=(n, 8))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shares_sum_to_one(seed):
    S, C, E = random_views(seed)
    rep = dominance_similarity(S, C, E, seed=seed)
    assert abs(rep.similarity_semantic + rep.similarity_collaborative - 1.0) <= 1e-12
    assert 0 <= rep.similarity_semantic <= 1
    assert rep.kl_s_e >= 0 and rep.kl_c_e >= 0


def test_identical_semantic_view_takes_all():
    S, C, _ = random_views(1)
    rep = dominance_similarity(S, C, S.copy())
    assert rep.kl_s_e == 0.0
    assert rep.kl_c_e > 0
    assert (rep.similarity_semantic, rep.similarity_collaborative) == (1.0, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swap_symmetry_is_exact(seed):
    S, C, E = random_views(seed)
    a = dominance_similarity(S, C, E, seed=3)
    b = dominance_similarity(C, S, E, seed=3)
    assert a.similarity_semantic == b.similarity_collaborative
    assert a.similarity_collaborative == b.similarity_semantic
    assert (a.kl_s_e, a.kl_c_e) == (b.kl_c_e, b.kl_s_e)


def test_profiles_ignore_rotation_and_scale():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 4))
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    np.testing.assert_allclose(similarity_profile(3 * x @ q), similarity_profile(x), atol=1e-12)


def test_degenerate_matrix_rejected():
    S, C, E = random_views(0)
    with pytest.raises(ValueError, match="variance"):
        dominance_similarity(S, np.ones_like(C), E)


def test_dominance_report_outputs():
    rep = dominance_similarity(*random_views(4))
    assert '"n_clusters": 10' in rep.to_json()
    assert "semantic" in rep.to_text()
    assert rep.max_share >= 0.5


# -- PCA and concat -------------------------------------------------------------------


def test_pca_discarded_eigenvalue_oracle():
    x = np.random.default_rng(3).normal(size=(50, 16))
    res = pca(x, 6)
    xc = x - x.mean(0)
    recon = res.scores @ res.components
    err = np.sum((xc - recon) ** 2)
    eig = np.sort(np.linalg.eigvalsh(xc.T @ xc))[::-1]
    assert err == pytest.approx(eig[6:].sum(), rel=1e-9)


def test_pca_rank_deficient_zero_pads(caplog):
    x = np.random.default_rng(0).normal(size=(4, 10))
    res = pca(x, 6)
    assert res.scores.shape == (4, 6)
    assert not res.scores[:, 3:].any()
    assert "zero-padding" in caplog.text


def test_concat_of_decorrelated_input_preserves_norms():
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.normal(size=(40, 6)))
    S = q * np.array([6.0, 5, 4, 3, 2, 1])  # orthogonal columns, zero-mean after centering
    S -= S.mean(0)
    C = rng.normal(size=(40, 6))
    out = concat_baseline(S, C).rows.astype(np.float64)
    assert out.shape == (40, 12)
    left = np.linalg.norm(out[:, :6], axis=1)
    ratio = left / np.linalg.norm(S, axis=1)
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-5)


def test_concat_with_equal_inputs_gives_matching_halves():
    S = np.random.default_rng(6).normal(size=(30, 5))
    out = concat_baseline(S, S).rows.astype(np.float64)
    left, right = out[:, :5], out[:, 5:]
    # PCA only rotates, so the two halves agree up to rotation
    np.testing.assert_allclose(left @ left.T, right @ right.T, atol=1e-5)
    assert right.std() == pytest.approx(1.0, abs=1e-6)


def test_concat_keeps_tokens_and_checks_rows():
    C = EmbeddingMatrix(np.random.default_rng(0).normal(size=(5, 2)), list("abcde"))
    out = concat_baseline(np.random.default_rng(1).normal(size=(5, 4)), C)
    assert out.tokens == list("abcde")
    with pytest.raises(ValueError):
        concat_baseline(np.ones((4, 3)), C)
