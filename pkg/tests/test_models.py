import numpy as np
import pytest

from odeformer import tensor as T
from odeformer.blocks import TAGS, declared_coefficient_count
from odeformer.errors import LengthError
from odeformer.models import (CausalLM, ModelConfig, Seq2Seq, SeqBatch, decode, decode_step, encode,
                              greedy_decode, init_model, lm_forward, perplexity, sinusoidal_positions)
from odeformer.tensor import Tensor, backward, grad_check


def small(**kw):
    base = dict(vocab_size=12, d_model=8, heads=2, ffn_dim=16, enc_depth=2, dec_depth=1, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


def tokens(rng, b, n, vocab=12, low=3):
    return rng.integers(low, vocab, size=(b, n))


def ln(x, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def test_config_text_round_trip(tmp_path):
    cfg = small(variant="rk2gatedsigmoidpair", granularity="sublayerwise", tie_embeddings=False)
    assert cfg.variant == "RK2GatedSigmoidPair" and cfg.granularity == "SublayerWise"
    cfg.save(tmp_path / "m.cfg")
    assert ModelConfig.load(tmp_path / "m.cfg") == cfg
    assert "d_model=8\n" in cfg.to_text()


@pytest.mark.parametrize("kw", [
    dict(heads=3), dict(enc_depth=0), dict(variant="RK3"), dict(granularity="Weird"),
    dict(position="Rotary"), dict(variant="DLCL", share_repeat=2),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        small(**kw)


def test_zero_increment_encoder_is_normed_embedding():
    cfg = small(variant="RK4")
    params = init_model(cfg, seed=0, zero_output=True)
    src = tokens(np.random.default_rng(0), 2, 7)
    out = encode(cfg, params, src).data
    x = params["src_embed"].data[src] * np.sqrt(cfg.d_model) + sinusoidal_positions(7, 8)
    np.testing.assert_allclose(out, ln(x), atol=1e-12)


def test_euler_and_rk2_differ():
    src = tokens(np.random.default_rng(1), 2, 5)
    outs = []
    for v in ("Euler", "RK2"):
        cfg = small(enc_depth=1, variant=v)
        outs.append(encode(cfg, init_model(cfg, seed=3), src).data)
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


def test_encode_deterministic():
    cfg = small(variant="RK2GatedSigmoid")
    src = tokens(np.random.default_rng(2), 3, 6)
    a = encode(cfg, init_model(cfg, seed=5), src).data
    b = encode(cfg, init_model(cfg, seed=5), src).data
    assert a.tobytes() == b.tobytes()


def test_dropout_only_with_rng():
    cfg = small(dropout=0.3)
    params = init_model(cfg, seed=0)
    src = tokens(np.random.default_rng(2), 2, 6)
    base = encode(cfg, params, src).data
    np.testing.assert_array_equal(base, encode(cfg, params, src).data)
    noisy = encode(cfg, params, src, rng=np.random.default_rng(0)).data
    assert np.abs(noisy - base).max() > 1e-6


def test_length_errors():
    cfg = small(max_len=6)
    params = init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(LengthError):
        encode(cfg, params, tokens(rng, 1, 7))
    mem = encode(cfg, params, tokens(rng, 1, 4))
    with pytest.raises(LengthError):
        decode_step(cfg, params, tokens(rng, 1, 7), mem, tokens(rng, 1, 4))


def test_decode_step_tied_oracle():
    cfg = small()
    params = init_model(cfg, seed=4, zero_output=True)
    rng = np.random.default_rng(4)
    src, prefix = tokens(rng, 2, 5), tokens(rng, 2, 3)
    mem = encode(cfg, params, src)
    logits = decode_step(cfg, params, prefix, mem, src).data
    E = params["tgt_embed"].data
    h = ln(E[prefix] * np.sqrt(8) + sinusoidal_positions(3, 8))[:, -1]
    np.testing.assert_allclose(logits, h @ E.T, atol=1e-12)
    p = T.softmax(Tensor(logits)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_decoder_causality():
    cfg = small(variant="RK4")
    params = init_model(cfg, seed=1)
    rng = np.random.default_rng(1)
    src, tgt = tokens(rng, 2, 5), tokens(rng, 2, 6)
    mem = encode(cfg, params, src)
    a = decode(cfg, params, tgt, mem, src).data
    j = 3
    tgt2 = tgt.copy()
    tgt2[:, j] = (tgt2[:, j] + 1 - 3) % 9 + 3
    b = decode(cfg, params, tgt2, mem, src).data
    np.testing.assert_array_equal(a[:, :j], b[:, :j])
    assert np.abs(a[:, j:] - b[:, j:]).max() > 0


@pytest.mark.parametrize("tag", TAGS)
def test_lm_causality_every_variant(tag):
    cfg = small(dec_depth=0, enc_depth=3, variant=tag)
    params = init_model(cfg, seed=2)
    rng = np.random.default_rng(2)
    x = tokens(rng, 2, 7)
    a = encode(cfg, params, x).data
    x2 = x.copy()
    x2[:, 4] = (x2[:, 4] + 1 - 3) % 9 + 3
    b = encode(cfg, params, x2).data
    np.testing.assert_array_equal(a[:, :4], b[:, :4])


def test_decoder_blocks_run_euler():
    cfg = small(variant="RK4", enc_depth=2, dec_depth=2)
    params = init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    src, tgt = tokens(rng, 1, 4), tokens(rng, 1, 3)
    log = []
    mem = encode(cfg, params, src, stage_log=log)
    decode(cfg, params, tgt, mem, src, stage_log=log)
    enc = [n for b, n in log if b.startswith("enc")]
    dec = [n for b, n in log if b.startswith("dec")]
    assert enc == [4, 4]
    assert dec == [1] * 6


@pytest.mark.parametrize("granularity,expected", [
    ("Fused", [2]), ("SublayerWise", [2, 2]), ("SanOnly", [2, 1]), ("FfnOnly", [1, 2]),
])
def test_granularity_stage_counts(granularity, expected):
    cfg = small(variant="RK2", enc_depth=1, dec_depth=0, granularity=granularity)
    log = []
    encode(cfg, init_model(cfg, seed=0), tokens(np.random.default_rng(0), 1, 4), stage_log=log)
    assert [n for _, n in log] == expected


def test_share_repeat_doubles_blocks():
    cfg = small(enc_depth=2, dec_depth=0, share_repeat=2)
    base = small(enc_depth=2, dec_depth=0)
    assert init_model(cfg).num_parameters() == init_model(base).num_parameters()
    log = []
    encode(cfg, init_model(cfg), tokens(np.random.default_rng(0), 1, 4), stage_log=log)
    assert len(log) == 4


@pytest.mark.parametrize("tag", TAGS)
def test_parameter_parity(tag):
    kw = dict(vocab_size=32, d_model=64, heads=4, ffn_dim=128, enc_depth=6, dec_depth=2)
    euler = init_model(ModelConfig(variant="Euler", **kw)).num_parameters()
    cfg = ModelConfig(variant=tag, **kw)
    count = init_model(cfg).num_parameters()
    extra = sum(declared_coefficient_count(tag, 64, i) for i in range(6))
    assert count == euler + extra


def test_lm_uniform_loss():
    cfg = small(vocab_size=10, dec_depth=0)
    params = init_model(cfg, seed=0)
    params["embed"].data[:] = 0.0
    x = tokens(np.random.default_rng(0), 2, 6, vocab=10)
    loss = lm_forward(cfg, params, x).data
    np.testing.assert_allclose(loss, np.log(10), rtol=1e-12)


def test_single_token_vocab():
    cfg = small(vocab_size=1, dec_depth=0, pad_id=-1)
    params = init_model(cfg, seed=0)
    x = np.zeros((2, 5), dtype=int)
    loss = lm_forward(cfg, params, x)
    assert np.all(loss.data == 0.0)
    assert perplexity(loss, x, pad_id=-1) == 1.0


def test_lm_pad_positions_zero():
    cfg = small(dec_depth=0)
    params = init_model(cfg, seed=0)
    x = tokens(np.random.default_rng(0), 2, 6)
    x[0, 4:] = 0
    loss = lm_forward(cfg, params, x).data
    assert np.all(loss[0, 3:] == 0.0) and np.all(loss[0, :3] > 0)


def test_random_init_ppl_bounded():
    cfg = small(vocab_size=32, d_model=16, heads=2, ffn_dim=32, dec_depth=0)
    params = init_model(cfg, seed=1)
    rng = np.random.default_rng(9)
    x = rng.integers(3, 32, size=(4, 16))
    ppl = perplexity(lm_forward(cfg, params, x), x)
    # random logits cannot beat uniform in expectation, so the bound is loose; value frozen from one run
    assert 1.0 <= ppl <= 2 * 32
    assert ppl == pytest.approx(57.358578550894954, rel=1e-9)


def test_greedy_decode_basics():
    cfg = small()
    params = init_model(cfg, seed=0)
    src = tokens(np.random.default_rng(0), 3, 5)
    assert greedy_decode(cfg, params, src, 0) == [[], [], []]
    a = greedy_decode(cfg, params, src, 6)
    assert a == greedy_decode(cfg, params, src, 6)
    assert all(len(s) <= 6 for s in a)


def test_greedy_ties_go_to_lowest_id():
    cfg = small()
    params = init_model(cfg, seed=0)
    params["tgt_embed"].data[:] = 0.0
    out = greedy_decode(cfg, params, tokens(np.random.default_rng(0), 2, 4), 3)
    assert out == [[0, 0, 0], [0, 0, 0]]


def test_model_gradcheck():
    cfg = small(variant="RK2GatedSigmoidPair", enc_depth=1, d_model=4, heads=2, ffn_dim=6)
    params = init_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    batch = SeqBatch(tokens(rng, 2, 4), np.concatenate(
        [np.ones((2, 1), int), tokens(rng, 2, 4), np.full((2, 1), 2)], axis=1))
    model = Seq2Seq(cfg, params)

    def loss(_):
        logits, tgt = model.logits_and_targets(batch)
        return T.mean(T.softmax_cross_entropy(logits, tgt, 0.1))

    for name in ("enc.layer00.san.wq", "enc.layer00.coef.gate.w", "dec.layer00.xan.wk", "tgt_embed"):
        assert grad_check(loss, params[name]) < 1e-6, name


def test_wrappers_check_shape():
    with pytest.raises(ValueError):
        Seq2Seq(small(dec_depth=0), None)
    with pytest.raises(ValueError):
        CausalLM(small(), None)
    cfg = small(dec_depth=0)
    lm = CausalLM(cfg, init_model(cfg))
    x = tokens(np.random.default_rng(0), 2, 5)
    logits, tgt = lm.logits_and_targets(x)
    assert logits.shape == (2, 4, 12) and tgt.shape == (2, 4)
    backward(T.mean(T.softmax_cross_entropy(logits, tgt)))
    assert lm.params["embed"].grad is not None
