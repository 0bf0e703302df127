import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitleak.autodiff import Graph, backward, finite_difference_gradient, jvp, relative_error
from splitleak.lab.corpus import generate_lines, news_spec
from splitleak.minilm import (
    BOS,
    PAD,
    ConfigError,
    ModelConfig,
    SegmentRange,
    TokenBatch,
    adapter_l2_norm,
    attach_adapters,
    build_model,
    detokenize,
    detokenize_bytes,
    encode_batch,
    forward_segment,
    full_forward,
    gru_invert,
    init_gru_inverter,
    lm_loss,
    load_model,
    perplexity,
    save_model,
    tokenize,
    train_lm,
)
from splitleak.minilm.model import add_positions, embed_tokens, run_blocks, apply_head

SMALL = ModelConfig(hidden=16, blocks=3, heads=2, ffn_dim=24, max_seq=16)


def random_batch(rng, B, S, V=256, lengths=None):
    ids = rng.integers(0, V, size=(B, S))
    ids[:, 0] = BOS
    mask = np.ones((B, S), dtype=bool)
    if lengths is not None:
        for i, n in enumerate(lengths):
            ids[i, n:] = PAD
            mask[i, n:] = False
    return TokenBatch(ids, mask)


# ----------------------------------------------------------------- tokenizer

def test_tokenize_empty():
    assert tokenize("", 4) == [BOS, PAD, PAD, PAD]


def test_tokenize_bytes():
    assert tokenize("ab", 4) == [BOS, 97, 98, PAD]


def test_tokenize_truncates():
    assert tokenize("abcdef", 3) == [BOS, 97, 98]


def test_round_trip_random_ascii():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(0, 40))
        s = "".join(chr(c) for c in rng.integers(32, 127, size=n))
        assert detokenize(tokenize(s, 41)) == s


@given(st.binary(max_size=60))
@settings(max_examples=200, deadline=None)
def test_round_trip_arbitrary_bytes(raw):
    assert detokenize_bytes(tokenize(raw, 61)) == raw


# -------------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [dict(vocab_size=100), dict(hidden=10, heads=4), dict(blocks=2)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_build_model_determinism():
    a = build_model(SMALL, 3)
    b = build_model(SMALL, 3)
    c = build_model(SMALL, 4)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_init_entropy_near_uniform():
    cfg = ModelConfig()
    params = build_model(cfg, 0)
    batch = random_batch(np.random.default_rng(1), 4, 32)
    z = full_forward(params, batch).data
    p = np.exp(z - z.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ent = -(p * np.log(p)).sum(-1)
    assert np.all(np.abs(ent / math.log(cfg.vocab_size) - 1) < 0.05)


# ------------------------------------------------------------------- forward

def test_composition_identity():
    params = build_model(SMALL, 0)
    batch = random_batch(np.random.default_rng(2), 3, 10, lengths=[10, 6, 3])
    full = full_forward(params, batch).data
    for k in range(SMALL.blocks + 1):
        h = forward_segment(params, SMALL, SegmentRange(0, k, embed=True), batch)
        out = forward_segment(params, SMALL, SegmentRange(k, SMALL.blocks, head=True), h,
                              pad_mask=batch.pad_mask)
        np.testing.assert_allclose(out.data, full, rtol=0, atol=1e-12)


def test_zero_block_range_is_identity():
    params = build_model(SMALL, 0)
    h = np.random.default_rng(0).normal(size=(2, 5, SMALL.hidden))
    out = forward_segment(params, SMALL, SegmentRange(1, 1), h)
    assert np.array_equal(out.data, h)


def test_segment_kind_mismatch():
    params = build_model(SMALL, 0)
    with pytest.raises(ValueError):
        forward_segment(params, SMALL, SegmentRange(0, 1, embed=True), np.zeros((1, 4, 16)))
    with pytest.raises(ValueError):
        forward_segment(params, SMALL, SegmentRange(1, 2), np.zeros((1, 4), dtype=int))


def test_causality_future_permutation():
    params = build_model(SMALL, 5)
    rng = np.random.default_rng(7)
    for _ in range(20):
        S = int(rng.integers(3, 12))
        t = int(rng.integers(0, S - 1))
        batch = random_batch(rng, 2, S)
        ids = batch.ids.copy()
        for row in ids:
            row[t + 1:] = rng.permutation(row[t + 1:])
        other = TokenBatch(ids, batch.pad_mask)
        a = full_forward(params, batch).data[:, : t + 1]
        b = full_forward(params, other).data[:, : t + 1]
        np.testing.assert_array_equal(a, b)


def test_causality_jvp_probe():
    params = build_model(SMALL, 5)
    batch = random_batch(np.random.default_rng(8), 2, 8)
    g = Graph()
    e = g.leaf(embed_tokens(params, batch.ids).data)
    h = run_blocks(params, add_positions(params, e), 0, SMALL.blocks, SMALL, batch.pad_mask)
    logits = apply_head(params, h, SMALL)
    for u in range(8):
        v = np.zeros(e.shape)
        v[:, u] = np.random.default_rng(u).normal(size=(2, SMALL.hidden))
        d = jvp(logits, [(e, v)])
        assert np.all(d[:, :u] == 0)
        assert np.abs(d[:, u]).max() > 0


# ---------------------------------------------------------------------- loss

def test_lm_loss_uniform():
    batch = random_batch(np.random.default_rng(0), 2, 6, lengths=[6, 4])
    loss = lm_loss(np.zeros((2, 6, 258)), batch).item()
    assert abs(loss - math.log(258)) < 1e-9


def test_lm_loss_perfect():
    batch = random_batch(np.random.default_rng(0), 2, 6, lengths=[6, 4])
    z = np.zeros((2, 6, 258))
    for b in range(2):
        for t in range(5):
            z[b, t, batch.ids[b, t + 1]] = 1e4
    assert lm_loss(z, batch).item() < 1e-3


def test_lm_loss_position_oracle():
    a, b = ord("a"), ord("b")
    batch = TokenBatch.from_ids([[BOS, a, b]])
    z = np.random.default_rng(3).normal(size=(1, 3, 258))

    def nll(row, target):
        m = row.max()
        return -(row[target] - m - math.log(np.exp(row - m).sum()))

    expected = (nll(z[0, 0], a) + nll(z[0, 1], b)) / 2
    assert abs(lm_loss(z, batch).item() - expected) < 1e-12


def test_lm_loss_all_pad_targets():
    batch = TokenBatch(np.array([[BOS, PAD]]), np.array([[True, False]]))
    with pytest.raises(ValueError):
        lm_loss(np.zeros((1, 2, 258)), batch)


# ------------------------------------------------------------------ adapters

def test_adapters_noop_at_attach():
    params = build_model(SMALL, 0)
    adapted = attach_adapters(params, rank=2, seed=1)
    batch = random_batch(np.random.default_rng(0), 2, 7)
    np.testing.assert_allclose(full_forward(adapted, batch).data, full_forward(params, batch).data,
                               rtol=0, atol=1e-12)


def test_adapter_norm_at_attach():
    adapted = attach_adapters(build_model(SMALL, 0), rank=2, seed=1)
    a_sq = sum(float((adapted[k] ** 2).sum()) for k in adapted if k.endswith("lora_a"))
    assert abs(adapter_l2_norm(adapted) - math.sqrt(a_sq)) < 1e-12


def test_adapter_unknown_name():
    with pytest.raises(KeyError):
        attach_adapters(build_model(SMALL, 0), which=["nope"])


def test_adapter_norm_grows(news_corpus):
    adapted = attach_adapters(build_model(SMALL, 0), rank=2, seed=1)
    before = adapter_l2_norm(adapted)
    trained, _ = train_lm(adapted, news_corpus, steps=100, batch_size=4, lr=3e-3, seed=0)
    assert adapter_l2_norm(trained) > before
    # only adapters move
    assert np.array_equal(trained["embed"], adapted["embed"])


# ----------------------------------------------------------------------- GRU

def test_gru_eval_deterministic():
    w = init_gru_inverter(8, 20, hidden=12, seed=0)
    x = np.random.default_rng(0).normal(size=(2, 5, 8))
    assert np.array_equal(gru_invert(w, x).data, gru_invert(w, x).data)


def test_gru_unidirectional():
    w = init_gru_inverter(8, 20, hidden=12, seed=0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 8))
    y = x.copy()
    y[:, 3:] += rng.normal(size=(2, 3, 8))
    np.testing.assert_array_equal(gru_invert(w, x).data[:, :3], gru_invert(w, y).data[:, :3])


def test_gru_zero_weights_give_bias():
    w = {k: np.zeros_like(v) for k, v in init_gru_inverter(8, 20, hidden=12, seed=0).items()}
    w["b_out"] = np.arange(20.0)
    out = gru_invert(w, np.random.default_rng(0).normal(size=(2, 4, 8))).data
    assert np.array_equal(out, np.broadcast_to(np.arange(20.0), out.shape))


def test_gru_dropout_train_only():
    w = init_gru_inverter(8, 20, hidden=12, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 4, 8))
    tr = gru_invert(w, x, train_mode=True, rng=np.random.default_rng(0)).data
    ev = gru_invert(w, x).data
    assert not np.allclose(tr, ev)


# ---------------------------------------------------------------- perplexity

def test_perplexity_untrained_near_vocab():
    cfg = ModelConfig()
    params = build_model(cfg, 0)
    batch = random_batch(np.random.default_rng(4), 8, 32)
    assert abs(perplexity(params, [batch]) / cfg.vocab_size - 1) < 0.10


def test_perplexity_is_exp_loss():
    params = build_model(SMALL, 0)
    batch = random_batch(np.random.default_rng(4), 2, 9, lengths=[9, 5])
    loss = lm_loss(full_forward(params, batch), batch).item()
    assert abs(perplexity(params, [batch]) - math.exp(loss)) < 1e-9 * math.exp(loss)


def test_perplexity_empty():
    with pytest.raises(ValueError):
        perplexity(build_model(SMALL, 0), [])


@pytest.mark.slow
def test_perplexity_decreases_during_pretraining():
    lines = generate_lines(news_spec(600, seed=11)).surface
    train, test = encode_batch(lines[:500], 64), encode_batch(lines[500:], 64)
    params = build_model(ModelConfig(), 0)
    trace = [perplexity(params, [test])]
    for _ in range(4):
        params, _ = train_lm(params, train, steps=50, batch_size=8, seed=len(trace), warmup=10)
        trace.append(perplexity(params, [test]))
    for prev, cur in zip(trace, trace[1:]):
        assert cur <= prev * 1.02
    assert trace[-1] < trace[0]


# ------------------------------------------------------------ gradient check

@pytest.mark.parametrize("group", ["embed", "blocks.1.wq", "blocks.0.wo", "blocks.2.w_gate",
                                   "blocks.1.w_down", "blocks.0.attn_norm", "final_norm", "head",
                                   "pos", "blocks.1.wv.lora_a", "blocks.2.wk.lora_b"])
def test_lm_gradient_matches_fd(group):
    params = attach_adapters(build_model(SMALL, 0), rank=2, seed=1)
    # give B a nonzero value so the adapter path is exercised
    rng = np.random.default_rng(9)
    params = params.with_weights({k: rng.normal(0, 0.1, params[k].shape)
                                  for k in params if k.endswith("lora_b")})
    batch = random_batch(rng, 2, 8, lengths=[8, 6])
    base = dict(params.weights)

    def loss_at(w):
        return lm_loss(full_forward(params, batch, {**base, group: w}), batch)

    g = Graph()
    leaf = g.leaf(base[group])
    grad = backward(loss_at(leaf), leaf)
    # restrict to a random subset of entries for the larger tables
    flat = np.asarray(base[group]).ravel()
    idx = rng.choice(flat.size, size=min(flat.size, 24), replace=False)
    fd = []
    for i in idx:
        def f(v, i=i):
            w = flat.copy()
            w[i] = v.item()
            return loss_at(w.reshape(base[group].shape))
        fd.append(finite_difference_gradient(f, np.array(flat[i]), h=1e-5).item())
    got = grad.ravel()[idx]
    assert relative_error(got, np.array(fd), floor=1e-6) < 1e-4


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    params = attach_adapters(build_model(SMALL, 2), rank=3, seed=0)
    save_model(tmp_path / "m", params)
    loaded = load_model(tmp_path / "m")
    assert loaded.checksum() == params.checksum()
    assert loaded.config == params.config and loaded.adapter_rank == 3


def test_checkpoint_truncated_blob(tmp_path):
    from splitleak.minilm.checkpoint import CheckpointError
    save_model(tmp_path / "m", build_model(SMALL, 2))
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m")
