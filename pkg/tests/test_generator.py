import math

import numpy as np
import pytest

from unger import numerics as nx
from unger.corpus import SyntheticSpec, generate_synthetic
from unger.generator import (
    BOS,
    DIS,
    GenConfig,
    GenModel,
    Stage2Config,
    contrastive_loss,
    distill_loss,
    forward_hidden,
    gen_loss,
    history_tokens,
    make_batch,
    sample_negatives,
    stage2_loss,
    train_stage2,
)
from unger.quantizer import UnicodeTable, random_assignment

SMALL = GenConfig(d_model=16, heads=2, hidden=32, n_encoder=1, n_decoder=2, seed=0)


def small_model(table, d_c=6, **overrides):
    cfg = GenConfig(**{**SMALL.__dict__, **overrides})
    return GenModel(table.level_sizes(), d_c, cfg)


def test_single_code_levels_give_zero_loss():
    table = UnicodeTable([(0, 0, 0)], K=1, levels=3)
    model = small_model(table)
    batch = make_batch(model, table, [[0], [0, 0]], [0, 0])
    assert gen_loss(model, batch).item() == pytest.approx(0.0, abs=1e-7)


def test_untrained_loss_near_uniform():
    table = random_assignment(4000, 256, 4, seed=1, exhaustive=True)
    model = GenModel(table.level_sizes(), 8, GenConfig(seed=1))
    rng = np.random.default_rng(2)
    histories = [rng.integers(4000, size=rng.integers(1, 21)) for _ in range(1000)]
    batch = make_batch(model, table, histories, rng.integers(4000, size=1000))
    with nx.no_grad():
        loss = gen_loss(model, batch).item()
    assert abs(loss - math.log(256)) <= 0.15


def decoder_hidden(model, table, history, dec_tokens):
    enc, mask = history_tokens(model, table, [history])
    with nx.no_grad():
        memory = model.encode(enc, mask)
        return model.decode(memory, mask, np.asarray([dec_tokens])).data[0]


def test_decoder_is_causal():
    table = random_assignment(27, 3, 3, seed=0, exhaustive=True)
    model = small_model(table)
    hist = [1, 2, 3]
    base = [BOS] + model.code_tokens((0, 1, 2)) + [DIS]
    prev_changed = [BOS] + model.code_tokens((1, 1, 2)) + [DIS]
    next_changed = [BOS] + model.code_tokens((0, 1, 0)) + [DIS]
    h = decoder_hidden(model, table, hist, base)
    h_prev = decoder_hidden(model, table, hist, prev_changed)
    h_next = decoder_hidden(model, table, hist, next_changed)
    # position 2 predicts c_3; it sees c_2 (token index 2) and c_1 but not c_3
    assert not np.allclose(h[1], h_prev[1])
    np.testing.assert_array_equal(h[:3], h_next[:3])


def test_distillation_token_leaves_code_positions_unchanged():
    table = random_assignment(16, 4, 2, seed=0, exhaustive=True)
    model = small_model(table)
    code = [BOS] + model.code_tokens(table.codes[5])
    with_dis = decoder_hidden(model, table, [1, 2], code + [DIS])
    without = decoder_hidden(model, table, [1, 2], code)
    np.testing.assert_allclose(with_dis[:3], without, atol=1e-6)


def test_heads_normalize():
    table = random_assignment(50, 5, 2, seed=0)
    model = small_model(table)
    batch = make_batch(model, table, [[1, 2], [3]], [4, 5])
    with nx.no_grad():
        hidden = forward_hidden(model, batch)
        for level, head in enumerate(model.heads):
            p = nx.softmax(head(hidden[:, level, :])).data.astype(np.float64)
            np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)


def test_code_outside_vocabulary_rejected():
    table = random_assignment(9, 3, 2, seed=0, exhaustive=True)
    model = small_model(table)
    with pytest.raises(ValueError, match="outside level"):
        model.code_tokens((0, 5))


# -- encoder ------------------------------------------------------------------------


def test_single_item_history_has_no_padding():
    table = random_assignment(27, 3, 3, seed=0, exhaustive=True)
    model = small_model(table)
    tokens, mask = history_tokens(model, table, [[4]])
    assert tokens.shape == (1, 3) and mask.all()


def test_pad_tail_does_not_leak():
    table = random_assignment(27, 3, 3, seed=0, exhaustive=True)
    model = small_model(table)
    tokens, mask = history_tokens(model, table, [[4, 5], [1, 2, 3, 6]])
    with nx.no_grad():
        h1 = model.encode(tokens, mask).data
        # scramble the PAD-only tail of the shorter row
        tokens2 = tokens.copy()
        tokens2[0, 6:] = np.array([3, 4, 5, 6, 7, 8])
        h2 = model.encode(tokens2, mask).data
    np.testing.assert_allclose(h1[0, :6], h2[0, :6], atol=1e-6)


def test_history_window_of_twenty():
    table = random_assignment(64, 4, 3, seed=0, exhaustive=True)
    model = small_model(table)
    recent = list(range(20))
    a, ma = history_tokens(model, table, [[40, 41] + recent])
    b, mb = history_tokens(model, table, [[50] + recent])
    with nx.no_grad():
        np.testing.assert_array_equal(model.encode(a, ma).data, model.encode(b, mb).data)


def test_all_pad_rejected():
    table = random_assignment(9, 3, 2, seed=0, exhaustive=True)
    model = small_model(table)
    with pytest.raises(ValueError):
        model.encode(np.zeros((1, 4), dtype=np.int64), np.zeros((1, 4), dtype=bool))
    with pytest.raises(ValueError):
        history_tokens(model, table, [[]])


# -- distillation --------------------------------------------------------------------


def distill_oracle(c_hat, pos, neg):
    out = 0.0
    for b in range(len(c_hat)):
        sp = float(c_hat[b] @ pos[b])
        sn = [float(c_hat[b] @ n) for n in neg[b]]
        out += -math.log(math.exp(sp) / (math.exp(sp) + sum(math.exp(s) for s in sn)))
    return out / len(c_hat)


def test_distill_equal_scores_is_ln2():
    c = np.array([[1.0, 0.0]])
    pos = np.array([[0.5, 3.0]])
    neg = np.array([[[0.5, -2.0]]])
    assert contrastive_loss(c, pos, neg).item() == pytest.approx(math.log(2), abs=1e-6)


def test_distill_limit():
    pos = np.array([[1.0, 0.0, 0.0]])
    neg = np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    assert contrastive_loss(100.0 * pos, pos, neg).item() < 1e-6


def test_distill_matches_formula_oracle():
    rng = np.random.default_rng(1)
    c, pos, neg = rng.normal(size=(5, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 7, 4))
    with nx.default_dtype(np.float64):
        got = contrastive_loss(c, pos, neg).item()
    assert got == pytest.approx(distill_oracle(c, pos, neg), abs=1e-6)


def test_distill_loss_reads_dis_position():
    rng = np.random.default_rng(2)
    table = random_assignment(20, 3, 2, seed=0)
    model = small_model(table, d_c=4)
    integrated = rng.normal(size=(20, 4))
    batch = make_batch(model, table, [[1, 2], [3]], [4, 5])
    negatives = sample_negatives(rng, batch.items, 20, 6)
    with nx.default_dtype(np.float64), nx.no_grad():
        got = distill_loss(model, batch, integrated, 6, negatives=negatives).item()
        hidden = forward_hidden(model, batch).data
    c_hat = np.stack([hidden[b, batch.dis_position[b]] for b in range(2)]) @ model.distill.weight.data \
        + model.distill.bias.data
    assert got == pytest.approx(distill_oracle(c_hat, integrated[batch.items], integrated[negatives]), abs=1e-5)


def test_negatives_exclude_target_and_cap_at_corpus():
    rng = np.random.default_rng(3)
    items = np.array([0, 3, 9])
    neg = sample_negatives(rng, items, 10, 128)
    assert neg.shape == (3, 9)
    for b, item in enumerate(items):
        assert item not in neg[b]
        assert sorted(neg[b]) == [i for i in range(10) if i != item]
    neg = sample_negatives(rng, items, 1000, 5)
    assert all(len(set(row)) == 5 for row in neg)
    with pytest.raises(ValueError):
        sample_negatives(rng, np.array([0]), 1, 1)


def test_beta_zero_leaves_projection_without_gradient():
    table = random_assignment(30, 3, 2, seed=0)
    model = small_model(table, d_c=4)
    batch = make_batch(model, table, [[1, 2], [3]], [4, 5])
    total, _, dist = stage2_loss(model, batch, np.ones((30, 4)), Stage2Config(beta=0.0))
    total.backward()
    assert dist is None
    for p in model.distill.parameters():
        assert p.grad is None or not p.grad.any()


def test_stage2_micro_gradcheck():
    rng = np.random.default_rng(4)
    table = random_assignment(9, 3, 2, seed=1, exhaustive=True)
    model = GenModel(table.level_sizes(), 3, GenConfig(d_model=8, heads=2, hidden=8, n_encoder=1, n_decoder=1,
                                                         seed=4))
    integrated = rng.normal(size=(9, 3))
    batch = make_batch(model, table, [[1, 2, 3], [4], [5, 6]], [0, 7, 8])
    negatives = sample_negatives(rng, batch.items, 9, 4)
    cfg = Stage2Config(beta=0.5)
    names, params = zip(*model.named_parameters())

    def fn():
        return stage2_loss(model, batch, integrated, cfg, negatives=negatives)[0]

    for res in nx.gradcheck(fn, list(params), names=names):
        assert res.rel_error <= 1e-3, res


# -- training -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_world():
    # four items per category keeps the irreducible within-category entropy at ln 4
    corpus, _ = generate_synthetic(SyntheticSpec(n_categories=8, items_per_category=4, n_users=400, seed=3))
    items = np.arange(corpus.n_items)
    table = UnicodeTable(list(zip(items // 4, items % 4)), 8, 2)
    integrated = np.random.default_rng(3).normal(size=(corpus.n_items, 8)).astype(np.float32)
    return corpus, table, integrated


def run_small(world, steps=300, seed=5):
    corpus, table, integrated = world
    model = GenModel(table.level_sizes(), 8, GenConfig(d_model=16, heads=2, hidden=32, n_decoder=1, seed=seed))
    cfg = Stage2Config(steps=steps, batch_size=64, warmup_steps=50, n_neg=16, seed=seed, log_every=0)
    return train_stage2(model, corpus, table, integrated, cfg)


def test_generative_loss_drops_thirty_percent(small_world):
    res = run_small(small_world)
    baseline = res.gen_losses[0]
    assert np.isfinite(res.gen_losses).all()
    assert np.mean(res.gen_losses[-30:]) <= 0.7 * baseline


def test_training_is_reproducible(small_world):
    a = run_small(small_world, steps=20)
    b = run_small(small_world, steps=20)
    assert a.gen_losses == b.gen_losses
    assert a.distill_losses == b.distill_losses


def test_table_must_cover_corpus(small_world):
    corpus, table, integrated = small_world
    model = GenModel(table.level_sizes(), 8, SMALL)
    with pytest.raises(ValueError):
        train_stage2(model, corpus, random_assignment(10, 2, 2), integrated, Stage2Config(steps=1))


def test_checkpoint_roundtrip(tmp_path):
    table = random_assignment(30, 3, 2, seed=0)
    model = small_model(table)
    model.save(tmp_path / "gen")
    back = GenModel.load(tmp_path / "gen")
    assert back.level_sizes == model.level_sizes and back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
