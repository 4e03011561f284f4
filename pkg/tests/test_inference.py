import math

import numpy as np
import pytest

from unger import numerics as nx
from unger.corpus import InteractionCorpus, SyntheticSpec, generate_synthetic
from unger.generator import BOS, GenConfig, GenModel, history_tokens
from unger.inference import (
    RankedList,
    batch_recommend,
    beam_decode,
    bench_cost,
    decode_many,
    merge_streams,
    sequence_log_prob,
)
from unger.quantizer import UnicodeTable, disambiguate, random_assignment

MICRO = dict(d_model=8, heads=2, hidden=16, n_encoder=1, n_decoder=1)


def micro_model(table, seed, float64=True):
    model = GenModel(table.level_sizes(), 4, GenConfig(seed=seed, **MICRO))
    rng = np.random.default_rng(seed)
    for head in model.heads:
        # sharper than the default init so rankings are not near-ties
        head.weight.data = rng.normal(scale=1.0, size=head.weight.shape).astype(head.weight.dtype)
    if float64:
        for p in model.parameters():
            p.data = p.data.astype(np.float64)
    return model


def random_table(rng):
    K = int(rng.integers(2, 5))
    L = int(rng.integers(1, 4))
    n = int(rng.integers(1, min(64, K ** L) + 1))
    base = rng.integers(K, size=(n, L))
    # occasional duplicate codes exercise the disambiguation level
    return UnicodeTable(disambiguate(base), K, L)


def enumeration_oracle(model, table, history):
    """Score every item by teacher forcing its own code, one item at a time."""
    enc, mask = history_tokens(model, table, [history])
    scores = []
    with nx.no_grad():
        memory = model.encode(enc, mask)
        for code in table.codes:
            dec = np.array([[BOS] + model.code_tokens(code)])
            hidden = model.decode(memory, mask, dec).data[0]
            total = 0.0
            for t, c in enumerate(code):
                logits = model.heads[t](nx.Tensor(hidden[t:t + 1])).data[0].astype(np.float64)
                total += logits[c] - math.log(np.exp(logits - logits.max()).sum()) - logits.max()
            scores.append(total)
    order = sorted(range(table.n_items), key=lambda i: (-scores[i], i))
    return order, [scores[i] for i in order]


def test_beam_equals_enumeration_on_random_micro_models():
    rng = np.random.default_rng(0)
    for trial in range(60):
        table = random_table(rng)
        model = micro_model(table, seed=trial)
        history = rng.integers(table.n_items, size=rng.integers(1, 6)).tolist()
        n = table.n_items
        with nx.default_dtype(np.float64):
            got = beam_decode(model, table, history, beam_width=n, k=n)
            items, scores = enumeration_oracle(model, table, history)
        assert got.items == items, trial
        np.testing.assert_allclose(got.scores, scores, atol=1e-9)


def test_hand_set_logits_two_by_two():
    table = UnicodeTable([(0, 0), (0, 1), (1, 0), (1, 1)], K=2, levels=2)
    model = micro_model(table, seed=1)
    biases = [np.array([0.3, -0.2]), np.array([1.0, 0.0])]
    for head, b in zip(model.heads, biases):
        head.weight.data = np.zeros_like(head.weight.data)
        head.bias.data = b.copy()

    def lsm(b):
        return b - math.log(np.exp(b).sum())

    l1, l2 = lsm(biases[0]), lsm(biases[1])
    expected = {i: l1[a] + l2[c] for i, (a, c) in enumerate(table.codes)}
    order = sorted(expected, key=lambda i: (-expected[i], i))
    got = beam_decode(model, table, [2, 3], beam_width=4, k=4)
    assert got.items == order == [0, 2, 1, 3]
    np.testing.assert_allclose(got.scores, [expected[i] for i in order], atol=1e-12)


def test_constrained_decoding_only_emits_table_items():
    rng = np.random.default_rng(1)
    for trial in range(1000):
        table = random_table(rng)
        model = micro_model(table, seed=10_000 + trial, float64=False)
        width = int(rng.integers(1, table.n_items + 1))
        got = beam_decode(model, table, [int(rng.integers(table.n_items))], beam_width=width, k=1)
        assert len(got) >= 1
        assert len(set(got.items)) == len(got.items)
        assert all(0 <= i < table.n_items for i in got.items)
        assert all(s <= 0 for s in got.scores)


def test_scores_add_up_to_teacher_forced_log_prob():
    table = random_assignment(60, 4, 3, seed=2)
    model = micro_model(table, seed=2, float64=False)
    got = beam_decode(model, table, [5, 9, 1], beam_width=20, k=10)
    assert got.scores == sorted(got.scores, reverse=True)
    for item, score in got.pairs():
        assert score == pytest.approx(sequence_log_prob(model, table, [5, 9, 1], item), abs=1e-5)


def test_wider_beam_never_lowers_top_score():
    rng = np.random.default_rng(3)
    for trial in range(15):
        table = random_table(rng)
        model = micro_model(table, seed=trial + 500)
        history = [int(rng.integers(table.n_items))]
        tops = [beam_decode(model, table, history, beam_width=b, k=1).scores[0]
                for b in range(1, table.n_items + 1)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


def test_argument_validation():
    table = random_assignment(10, 3, 2, seed=0)
    model = micro_model(table, seed=0)
    with pytest.raises(ValueError, match="beam_width"):
        beam_decode(model, table, [1], beam_width=3, k=5)
    with pytest.raises(ValueError):
        beam_decode(model, table, [], beam_width=5, k=5)


def test_batched_decoding_matches_single_queries():
    table = random_assignment(40, 4, 3, seed=4)
    model = micro_model(table, seed=4)
    histories = [[1], [2, 3, 4], list(range(25)), [39, 0]]
    batched = decode_many(model, table, histories, beam_width=8, k=5)
    for h, b in zip(histories, batched):
        single = beam_decode(model, table, h, beam_width=8, k=5)
        assert single.items == b.items
        np.testing.assert_allclose(single.scores, b.scores, atol=1e-9)


# -- batch_recommend ----------------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    corpus, _ = generate_synthetic(SyntheticSpec(n_categories=4, items_per_category=8, n_users=150, seed=5))
    table = random_assignment(corpus.n_items, 4, 3, seed=5)
    return corpus, table, micro_model(table, seed=5, float64=False)


def test_thread_count_does_not_change_results(world):
    corpus, table, model = world
    one = batch_recommend(model, table, corpus, beam_width=10, k=5, threads=1)
    four = batch_recommend(model, table, corpus, beam_width=10, k=5, threads=4)
    assert one == four


def test_env_thread_setting(world, monkeypatch):
    corpus, table, model = world
    monkeypatch.setenv("UNGER_THREADS", "3")
    users = list(range(70))
    assert batch_recommend(model, table, corpus, beam_width=6, k=3, users=users) == \
        batch_recommend(model, table, corpus, beam_width=6, k=3, users=users, threads=1)
    monkeypatch.setenv("UNGER_THREADS", "many")
    with pytest.raises(ValueError, match="UNGER_THREADS"):
        batch_recommend(model, table, corpus, beam_width=6, k=3, users=users)


def test_user_order_does_not_matter(world):
    corpus, table, model = world
    users = list(range(corpus.n_users))
    perm = np.random.default_rng(0).permutation(users).tolist()
    base = batch_recommend(model, table, corpus, beam_width=10, k=5, users=users)
    shuffled = batch_recommend(model, table, corpus, beam_width=10, k=5, users=perm)
    for u, ranked in zip(perm, shuffled):
        assert ranked.items == base[u].items
        np.testing.assert_allclose(ranked.scores, base[u].scores, atol=1e-5)


def test_one_user_corpus_matches_beam_decode(world):
    _, table, model = world
    corpus = InteractionCorpus([f"i{i}" for i in range(table.n_items)], ["u0"], [np.array([3, 4, 5, 6, 7])])
    (ranked,) = batch_recommend(model, table, corpus, split="test", beam_width=10, k=5)
    history, _ = corpus.eval_query(0, "test")
    assert ranked == beam_decode(model, table, history, beam_width=10, k=5)


# -- cost benchmark ------------------------------------------------------------------


def test_dual_mode_doubles_forwards_and_bytes():
    table = random_assignment(64, 4, 3, seed=6, exhaustive=True)
    model = micro_model(table, seed=6, float64=False)
    other_table = random_assignment(64, 4, 3, seed=7, exhaustive=True)
    other = micro_model(other_table, seed=7, float64=False)
    histories = [[1, 2], [3], [4, 5, 6]]
    uni = bench_cost([(model, table)], histories, beam_width=16, k=10)
    dual = bench_cost([(model, table), (other, other_table)], histories, beam_width=16, k=10)
    assert uni.mode == "unified" and dual.mode == "dual"
    assert uni.decoder_forwards == 3 * 3
    assert dual.decoder_forwards == 2 * uni.decoder_forwards
    assert dual.table_bytes == 2 * uni.table_bytes == 2 * 4 * 3 * 64
    assert '"decoder_forwards"' in uni.to_json()
    with pytest.raises(ValueError):
        bench_cost([], histories)


def test_merge_keeps_best_score_per_item():
    a = RankedList([1, 2, 3], [-0.1, -0.5, -2.0])
    b = RankedList([2, 4, 1], [-0.2, -0.3, -0.9])
    merged = merge_streams([a, b], 3)
    assert merged.items == [1, 2, 4]
    assert merged.scores == [-0.1, -0.2, -0.3]
