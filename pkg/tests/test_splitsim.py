import math

import numpy as np
import pytest

from splitleak.defenses import NoiseSpec
from splitleak.minilm import BOS, PAD, ModelConfig, TokenBatch, attach_adapters, build_model, full_forward, lm_loss
from splitleak.splitsim import (
    SplitError,
    SplitSpec,
    TrainingDiverged,
    centralized_step,
    init_state,
    pre_finetune,
    protocol_exchange,
    quantize,
    read_transcript_log,
    record_to_json,
    run_split_ft,
    sl_train_step,
    split,
    split_perplexity,
    write_transcript_log,
)

SMALL = ModelConfig(hidden=16, blocks=4, heads=2, ffn_dim=24, max_seq=16)


def random_batch(rng, B, S, lengths=None):
    ids = rng.integers(0, 256, size=(B, S))
    ids[:, 0] = BOS
    mask = np.ones((B, S), dtype=bool)
    for i, n in enumerate(lengths or []):
        ids[i, n:] = PAD
        mask[i, n:] = False
    return TokenBatch(ids, mask)


def test_split_reassemble_identity():
    params = attach_adapters(build_model(SMALL, 0), rank=2)
    seg = split(params, SplitSpec(1, 3))
    assert seg.reassemble().checksum() == params.checksum()
    assert not (set(seg.bottom) & set(seg.trunk) or set(seg.trunk) & set(seg.top) or set(seg.bottom) & set(seg.top))


def test_split_counts_default_model():
    seg = split(build_model(ModelConfig(), 0), SplitSpec(2, 6))
    blocks = lambda part: sorted({int(n.split(".")[1]) for n in part if n.startswith("blocks.")})
    assert "embed" in seg.bottom and blocks(seg.bottom) == [0, 1]
    assert blocks(seg.trunk) == [2, 3, 4, 5]
    assert blocks(seg.top) == [6, 7] and "head" in seg.top and "final_norm" in seg.top


@pytest.mark.parametrize("b,t", [(0, 6), (6, 6), (7, 6), (2, 9)])
def test_split_invalid(b, t):
    with pytest.raises(SplitError):
        split(build_model(ModelConfig(), 0), SplitSpec(b, t))


def test_split_equivalence_examples():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 7, lengths=[7, 4])
    spec = SplitSpec(1, 3)
    ex = protocol_exchange(split(params, spec), batch, NoiseSpec(), None)
    loss, grads, g_trk = centralized_step(params, spec, batch)
    assert abs(ex.loss - loss) <= 1e-12
    np.testing.assert_allclose(ex.transcript.grad_trunk_out, g_trk, rtol=0, atol=1e-12)
    merged = {**ex.grads["bottom"], **ex.grads["trunk"], **ex.grads["top"]}
    assert set(merged) == set(grads)
    for k in grads:
        np.testing.assert_allclose(merged[k], grads[k], rtol=0, atol=1e-12)


def test_split_equivalence_random_pairs():
    rng = np.random.default_rng(11)
    for i in range(20):
        params = build_model(SMALL, i)
        if i % 2:
            params = attach_adapters(params, rank=2, seed=i)
            params = params.with_weights({k: rng.normal(0, 0.05, params[k].shape)
                                          for k in params.adapter_names if k.endswith("lora_b")})
        b = int(rng.integers(1, 3))
        t = int(rng.integers(b + 1, 5))
        S = int(rng.integers(3, 10))
        batch = random_batch(rng, 2, S, lengths=[S, int(rng.integers(2, S + 1))])
        spec = SplitSpec(b, t)
        ex = protocol_exchange(split(params, spec), batch, NoiseSpec(), None)
        loss, grads, g_trk = centralized_step(params, spec, batch)
        assert abs(ex.loss - loss) <= 1e-12
        assert np.abs(ex.transcript.grad_trunk_out - g_trk).max() <= 1e-12
        merged = {**ex.grads["bottom"], **ex.grads["trunk"], **ex.grads["top"]}
        for k in grads:
            assert np.abs(merged[k] - grads[k]).max() <= 1e-12


def test_loss_matches_full_forward():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 6)
    ex = protocol_exchange(split(params, SplitSpec(2, 3)), batch, NoiseSpec(), None)
    assert abs(ex.loss - lm_loss(full_forward(params, batch), batch).item()) <= 1e-12


def test_laplace_zero_noise_limit_matches_clean():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 6)
    seg = split(params, SplitSpec(1, 3))
    clean = protocol_exchange(seg, batch, NoiseSpec(), None).transcript
    noisy = protocol_exchange(seg, batch, NoiseSpec.laplace(math.inf, clip=1e6),
                              np.random.default_rng(0)).transcript
    for name in ("smashed_btm", "trunk_out", "grad_trunk_out"):
        np.testing.assert_array_equal(getattr(clean, name), getattr(noisy, name))


def test_dxp_changes_smashed():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 6)
    seg = split(params, SplitSpec(1, 3))
    clean = protocol_exchange(seg, batch, NoiseSpec(), None).transcript
    noisy = protocol_exchange(seg, batch, NoiseSpec.dxp(0.05), np.random.default_rng(0)).transcript
    assert not np.allclose(clean.smashed_btm, noisy.smashed_btm)


def test_nopeek_adds_regularizer():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 6, 6)
    seg = split(params, SplitSpec(1, 3))
    ex = protocol_exchange(seg, batch, NoiseSpec.nopeek(0.5), None)
    assert ex.loss > ex.task_loss
    # the regularizer only changes Bottom gradients
    plain = protocol_exchange(seg, batch, NoiseSpec(), None)
    np.testing.assert_array_equal(ex.transcript.grad_trunk_out, plain.transcript.grad_trunk_out)
    assert not np.allclose(ex.grads["bottom"]["blocks.0.wq"], plain.grads["bottom"]["blocks.0.wq"])


def test_train_step_updates_and_counts():
    params = attach_adapters(build_model(SMALL, 1), rank=2)
    state = init_state(params, SplitSpec(1, 3))
    batch = random_batch(np.random.default_rng(0), 2, 6)
    new, tr, loss = sl_train_step(state, batch)
    assert new.step == 1 and tr.step == 0 and math.isfinite(loss)
    before, after = state.segments.merged(), new.segments.merged()
    for k in before:
        moved = not np.array_equal(before[k], after[k])
        assert moved == (".lora_" in k)


def test_nan_loss_aborts():
    params = build_model(SMALL, 1)
    params = params.with_weights({"head": np.full(params["head"].shape, np.nan)})
    state = init_state(params, SplitSpec(1, 3))
    with pytest.raises(TrainingDiverged, match="step 0"):
        sl_train_step(state, random_batch(np.random.default_rng(0), 2, 6))


def test_deeper_hidden_recorded():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 6)
    ex = protocol_exchange(split(params, SplitSpec(1, 4)), batch, NoiseSpec(), None, deeper_layer=3)
    assert ex.transcript.deeper_hidden.shape == ex.transcript.smashed_btm.shape
    with pytest.raises(SplitError):
        protocol_exchange(split(params, SplitSpec(1, 3)), batch, NoiseSpec(), None, deeper_layer=4)


def test_transcript_has_no_token_ids():
    params = build_model(SMALL, 1)
    batch = random_batch(np.random.default_rng(0), 2, 6)
    tr = protocol_exchange(split(params, SplitSpec(1, 3)), batch, NoiseSpec(), None).transcript
    fields = set(tr.__dataclass_fields__)
    assert not fields & {"ids", "token_ids", "tokens", "meta", "metadata", "example_ids"}
    for v in vars(tr).values() if hasattr(tr, "__dict__") else [getattr(tr, f) for f in fields]:
        if isinstance(v, np.ndarray) and v.dtype.kind in "iu":
            pytest.fail("integer array on transcript")


# -------------------------------------------------------------------- runs

@pytest.fixture(scope="module")
def tiny_run(news_corpus):
    params = attach_adapters(build_model(SMALL, 0), rank=2)
    return run_split_ft(params, SplitSpec(1, 3), news_corpus, steps=12, record_every=4,
                        record_batches=2, seed=3, test_corpus=news_corpus.rows(slice(0, 20)))


def test_run_cadence(tiny_run):
    steps = sorted({r.transcript.step for r in tiny_run.records})
    assert steps == [0, 4, 8, 12]
    assert len(tiny_run.records) == 8
    assert [s for s, _ in tiny_run.utility] == [0, 4, 8, 12]


def test_default_cadence_points():
    from splitleak.splitsim import recording_points
    assert recording_points(600, 200) == [0, 200, 400, 600]


def test_run_deterministic(tiny_run, news_corpus):
    params = attach_adapters(build_model(SMALL, 0), rank=2)
    again = run_split_ft(params, SplitSpec(1, 3), news_corpus, steps=12, record_every=4,
                         record_batches=2, seed=3, test_corpus=news_corpus.rows(slice(0, 20)))
    a = "".join(record_to_json(r) for r in tiny_run.records)
    b = "".join(record_to_json(r) for r in again.records)
    assert a == b
    assert again.utility == tiny_run.utility


def test_transcript_log_round_trip(tiny_run, tmp_path):
    path = write_transcript_log(tmp_path / "t.jsonl", tiny_run.records)
    loaded = list(read_transcript_log(path))
    assert len(loaded) == len(tiny_run.records)
    for orig, got in zip(tiny_run.records, loaded):
        q = quantize(orig)
        for name in ("smashed_btm", "trunk_out", "grad_trunk_out"):
            a = getattr(got.transcript, name)
            assert a.dtype == np.float64
            np.testing.assert_array_equal(a, getattr(q.transcript, name))
            np.testing.assert_allclose(a, getattr(orig.transcript, name), rtol=1e-6, atol=1e-6)
        np.testing.assert_array_equal(got.meta.token_ids, orig.meta.token_ids)
    assert path.read_text() == write_transcript_log(tmp_path / "u.jsonl", loaded).read_text()


@pytest.mark.slow
def test_ft_lowers_test_perplexity():
    from splitleak.lab.corpus import generate_lines, news_spec
    from splitleak.minilm import encode_batch, train_lm
    lines = generate_lines(news_spec(700, seed=21)).surface
    cfg = ModelConfig(hidden=32, blocks=4, heads=2, ffn_dim=64, max_seq=64)
    base, _ = train_lm(build_model(cfg, 0), encode_batch(lines[:300], 64), steps=60, batch_size=8, seed=0)
    params = attach_adapters(base, rank=4)
    run = run_split_ft(params, SplitSpec(1, 3), encode_batch(lines[300:600], 64), steps=120,
                       record_every=60, record_batches=1, seed=0,
                       test_corpus=encode_batch(lines[600:], 64))
    assert run.utility[-1][1] < run.utility[0][1]


def test_pre_finetune():
    from splitleak.lab.corpus import generate_lines, code_spec
    from splitleak.minilm import encode_batch
    corpus = encode_batch(generate_lines(code_spec(100, seed=2)).surface, 16)
    params = attach_adapters(build_model(SMALL, 0), rank=2)
    spec = SplitSpec(1, 3)
    same, n0 = pre_finetune(params, spec, corpus, 0)
    assert same is params
    norms = [n0]
    cur = params
    for extra in (10, 10, 20):
        cur, n = pre_finetune(cur, spec, corpus, extra, seed=len(norms))
        norms.append(n)
    assert all(b >= a for a, b in zip(norms, norms[1:]))
    # the trunk stays at its pretrained state
    assert all(np.array_equal(cur[k], params[k]) for k in split(params, spec).trunk)
    loss = protocol_exchange(split(cur, spec), corpus.rows(slice(0, 2)).trimmed(), NoiseSpec(), None).loss
    assert math.isfinite(loss)


def test_split_perplexity_matches_full():
    from splitleak.minilm import perplexity
    params = build_model(SMALL, 0)
    batch = random_batch(np.random.default_rng(0), 4, 8, lengths=[8, 5, 3, 8])
    assert abs(split_perplexity(split(params, SplitSpec(1, 3)), batch) - perplexity(params, [batch])) < 1e-9
