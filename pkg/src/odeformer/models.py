"""Sequence models assembled from ODE blocks.

Two shapes are supported:

* encoder-decoder (``dec_depth >= 1``): the configured block variant is used
  on the encoder only; every decoder sublayer is a plain Euler residual step.
* causal language model (``dec_depth == 0``): ``enc_depth`` causal layers, all
  using the configured variant.

Both are pre-norm and end with a final layer norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import (HISTORY_TAGS, BlockState, BlockVariant, SublayerSpec, block_forward,
                     init_sublayer, init_variant, parse_variant, sublayer_f)
from .errors import LengthError
from .kvconfig import KVConfig
from .tensor import ParamStore, Tensor

GRANULARITIES = ("SublayerWise", "SanOnly", "FfnOnly", "Fused")
POSITIONS = ("Sinusoidal", "LearnedAbsolute")
BOS, EOS = 1, 2


def _pick(name, options, what):
    for o in options:
        if o.lower() == str(name).strip().lower():
            return o
    raise ValueError(f"unknown {what} {name!r}; expected one of {options}")


@dataclass
class ModelConfig(KVConfig):
    vocab_size: int
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    variant: str = "Euler"
    granularity: str = "Fused"
    dropout: float = 0.0
    ln_eps: float = 1e-6
    max_len: int = 64
    tie_embeddings: bool = True
    position: str = "Sinusoidal"
    pad_id: int = 0
    share_repeat: int = 1  # apply each encoder layer this many times with one parameter set

    def __post_init__(self):
        self.variant = parse_variant(self.variant)
        self.granularity = _pick(self.granularity, GRANULARITIES, "granularity")
        self.position = _pick(self.position, POSITIONS, "position encoding")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.enc_depth < 1:
            raise ValueError("enc_depth must be >= 1")
        if self.dec_depth < 0:
            raise ValueError("dec_depth must be >= 0")
        if self.share_repeat < 1:
            raise ValueError("share_repeat must be >= 1")
        if self.share_repeat > 1 and self.variant in HISTORY_TAGS:
            raise ValueError("share_repeat is not defined for multistep variants")

    @property
    def is_lm(self) -> bool:
        return self.dec_depth == 0


@dataclass
class SeqBatch:
    """Source tokens ``[B, Ls]`` and target tokens ``[B, Lt]`` (BOS ... EOS, padded)."""

    source: np.ndarray
    target: np.ndarray


# ---------------------------------------------------------------------------
# parameters


def _specs(config: ModelConfig):
    san = SublayerSpec("SAN", config.d_model, heads=config.heads, dropout=config.dropout)
    ffn = SublayerSpec("FFN", config.d_model, ffn_dim=config.ffn_dim, dropout=config.dropout)
    return san, ffn


def _encoder_plan(config: ModelConfig):
    """(sublayers, variant tag, coefficient suffix) per ODE block of one encoder layer."""
    v = config.variant
    g = config.granularity
    if g == "Fused":
        return [(("san", "ffn"), v, "coef")]
    if g == "SublayerWise":
        return [(("san",), v, "coef_san"), (("ffn",), v, "coef_ffn")]
    if g == "SanOnly":
        return [(("san",), v, "coef_san"), (("ffn",), "Euler", "coef_ffn")]
    return [(("san",), "Euler", "coef_san"), (("ffn",), v, "coef_ffn")]


def layer_name(side: str, i: int) -> str:
    return f"{side}.layer{i:02d}"


def sinusoidal_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : d - d // 2]
    return out.astype(dtype)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64,
               zero_output: bool = False) -> ParamStore:
    """Deterministic parameter initialisation for ``config``.

    ``zero_output`` zeroes every sublayer output projection, which makes
    every block increment vanish.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d, V = config.d_model, config.vocab_size
    san, ffn = _specs(config)

    def table(name):
        store.add(name, (rng.standard_normal((V, d)) / math.sqrt(d)).astype(dtype))

    if config.is_lm:
        table("embed")
    else:
        table("src_embed")
        table("tgt_embed")
    if config.position == "LearnedAbsolute":
        store.add("pos_embed", (rng.standard_normal((config.max_len, d)) * 0.02).astype(dtype))
        if not config.is_lm:
            store.add("tgt_pos_embed", (rng.standard_normal((config.max_len, d)) * 0.02).astype(dtype))

    chain = 0
    for i in range(config.enc_depth):
        name = layer_name("enc", i)
        init_sublayer(san, store, f"{name}.san", rng, dtype, zero_output)
        init_sublayer(ffn, store, f"{name}.ffn", rng, dtype, zero_output)
        for _, tag, suffix in _encoder_plan(config):
            init_variant(tag, store, f"{name}.{suffix}", d, chain, dtype)
            chain += 1
    store.add("enc.ln_final.gain", np.ones(d, dtype))
    store.add("enc.ln_final.bias", np.zeros(d, dtype))

    for i in range(config.dec_depth):
        name = layer_name("dec", i)
        init_sublayer(san, store, f"{name}.san", rng, dtype, zero_output)
        init_sublayer(san, store, f"{name}.xan", rng, dtype, zero_output)
        init_sublayer(ffn, store, f"{name}.ffn", rng, dtype, zero_output)
    if config.dec_depth:
        store.add("dec.ln_final.gain", np.ones(d, dtype))
        store.add("dec.ln_final.bias", np.zeros(d, dtype))

    if not config.tie_embeddings:
        store.add("out_proj", (rng.standard_normal((d, V)) / math.sqrt(d)).astype(dtype))
    return store


def block_prefixes(config: ModelConfig) -> list[str]:
    """Layer name prefixes, bottom to top (encoder first)."""
    names = [layer_name("enc", i) for i in range(config.enc_depth)]
    names += [layer_name("dec", i) for i in range(config.dec_depth)]
    return names


# ---------------------------------------------------------------------------
# forward


def _embed(config, params, tokens, table, pos_table):
    tokens = np.asarray(tokens)
    b, n = tokens.shape
    if n > config.max_len:
        raise LengthError(f"sequence length {n} exceeds max_len {config.max_len}")
    x = T.scalar_mul(T.embedding_lookup(params[table], tokens), math.sqrt(config.d_model))
    if config.position == "Sinusoidal":
        pos = sinusoidal_positions(n, config.d_model, x.dtype)
        return T.add(x, Tensor(np.broadcast_to(pos, x.shape).copy()))
    ids = np.broadcast_to(np.arange(n), (b, n))
    return T.add(x, T.embedding_lookup(params[pos_table], ids))


def key_mask(tokens: np.ndarray, pad_id: int) -> np.ndarray:
    """``[B, 1, 1, L]``: True where the key is a real token."""
    return (np.asarray(tokens) != pad_id)[:, None, None, :]


def causal_mask(tokens: np.ndarray, pad_id: int) -> np.ndarray:
    n = np.asarray(tokens).shape[1]
    return np.tril(np.ones((n, n), dtype=bool))[None, None] & key_mask(tokens, pad_id)


def _counted(f, name, stage_log):
    if stage_log is None:
        return f
    calls = [0]

    def g(y):
        calls[0] += 1
        return f(y)

    g.calls = calls
    g.block = name
    return g


def _run_encoder_stack(config, params, x, mask, rng, stage_log):
    san, ffn = _specs(config)
    eps = config.ln_eps
    plan = _encoder_plan(config)
    uses_state = config.variant in HISTORY_TAGS
    state = BlockState.start(x) if uses_state else None
    y = x
    for i in range(config.enc_depth):
        name = layer_name("enc", i)
        p_san = params.scope(f"{name}.san")
        p_ffn = params.scope(f"{name}.ffn")

        def f_san(v, p=p_san):
            return sublayer_f(san, p, v, mask, rng=rng, eps=eps)

        def f_ffn(v, p=p_ffn):
            return sublayer_f(ffn, p, v, rng=rng, eps=eps)

        def f_fused(v):
            a = f_san(v)
            return T.add(a, f_ffn(T.add(v, a)))

        fns = {("san",): f_san, ("ffn",): f_ffn, ("san", "ffn"): f_fused}
        for _ in range(config.share_repeat):
            for subs, tag, suffix in plan:
                variant = BlockVariant(tag, params.scope(f"{name}.{suffix}"))
                block = f"{name}.{suffix}"
                f = _counted(fns[subs], block, stage_log)
                y, state = block_forward(variant, f, y, state)
                if stage_log is not None:
                    stage_log.append((block, f.calls[0]))
    return T.layer_norm(y, params["enc.ln_final.gain"], params["enc.ln_final.bias"], eps)


def encode(config: ModelConfig, params: ParamStore, source: np.ndarray, *,
           rng: Optional[np.random.Generator] = None, stage_log: Optional[list] = None) -> Tensor:
    """Encoder states ``[B, Ls, D]`` (or causal LM states when ``config.is_lm``).

    ``rng`` enables dropout; ``stage_log`` collects ``(block, F evaluations)``.
    """
    if config.is_lm:
        x = _embed(config, params, source, "embed", "pos_embed")
        mask = causal_mask(source, config.pad_id)
    else:
        x = _embed(config, params, source, "src_embed", "pos_embed")
        mask = key_mask(source, config.pad_id)
    return _run_encoder_stack(config, params, x, mask, rng, stage_log)


def _output_logits(config, params, h):
    if config.tie_embeddings:
        table = "embed" if config.is_lm else "tgt_embed"
        return T.matmul(h, T.transpose(params[table]))
    return T.matmul(h, params["out_proj"])


def decode(config: ModelConfig, params: ParamStore, target_in: np.ndarray, memory: Tensor,
           source: np.ndarray, *, rng: Optional[np.random.Generator] = None,
           stage_log: Optional[list] = None) -> Tensor:
    """Teacher-forced decoder logits ``[B, Lt, V]``."""
    san, ffn = _specs(config)
    eps = config.ln_eps
    euler = BlockVariant("Euler")
    self_mask = causal_mask(target_in, config.pad_id)
    cross_mask = key_mask(source, config.pad_id)
    y = _embed(config, params, target_in, "tgt_embed", "tgt_pos_embed")
    for i in range(config.dec_depth):
        name = layer_name("dec", i)
        p = {s: params.scope(f"{name}.{s}") for s in ("san", "xan", "ffn")}
        steps = [
            ("san", lambda v: sublayer_f(san, p["san"], v, self_mask, rng=rng, eps=eps)),
            ("xan", lambda v: sublayer_f(san, p["xan"], v, cross_mask, memory=memory, rng=rng, eps=eps)),
            ("ffn", lambda v: sublayer_f(ffn, p["ffn"], v, rng=rng, eps=eps)),
        ]
        for sub, fn in steps:
            block = f"{name}.{sub}"
            f = _counted(fn, block, stage_log)
            y, _ = block_forward(euler, f, y)
            if stage_log is not None:
                stage_log.append((block, f.calls[0]))
    h = T.layer_norm(y, params["dec.ln_final.gain"], params["dec.ln_final.bias"], eps)
    return _output_logits(config, params, h)


def decode_step(config: ModelConfig, params: ParamStore, prefix: np.ndarray, memory: Tensor,
                source: np.ndarray) -> Tensor:
    """Next-token logits ``[B, V]`` given a target prefix starting with BOS."""
    with T.no_grad():
        logits = decode(config, params, prefix, memory, source)
    return Tensor(logits.data[:, -1, :])


def lm_logits(config: ModelConfig, params: ParamStore, tokens: np.ndarray, *,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    return _output_logits(config, params, encode(config, params, tokens, rng=rng))


def lm_forward(config: ModelConfig, params: ParamStore, tokens: np.ndarray, *,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-position next-token cross-entropy ``[B, L-1]``; padded targets give 0."""
    tokens = np.asarray(tokens)
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    logits = lm_logits(config, params, inputs, rng=rng)
    return T.softmax_cross_entropy(logits, targets, 0.0, ignore=targets == config.pad_id)


def perplexity(loss_matrix, tokens: np.ndarray, pad_id: int = 0) -> float:
    data = loss_matrix.data if isinstance(loss_matrix, Tensor) else np.asarray(loss_matrix)
    keep = np.asarray(tokens)[:, 1:] != pad_id
    return float(np.exp(data[keep].mean()))


def greedy_decode(config: ModelConfig, params: ParamStore, source: np.ndarray,
                  max_out_len: int, bos_id: int = BOS, eos_id: int = EOS) -> list[list[int]]:
    """Argmax decoding; ties go to the lowest token id. BOS/EOS are stripped."""
    source = np.asarray(source)
    b = source.shape[0]
    outputs = [[] for _ in range(b)]
    if max_out_len <= 0:
        return outputs
    with T.no_grad():
        memory = encode(config, params, source)
        prefix = np.full((b, 1), bos_id, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_out_len):
            logits = decode_step(config, params, prefix, memory, source).data
            nxt = np.argmax(logits, axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == eos_id:
                    done[i] = True
                else:
                    outputs[i].append(int(nxt[i]))
            if done.all():
                break
            fill = np.where(done, config.pad_id, nxt)
            prefix = np.concatenate([prefix, fill[:, None]], axis=1)
    return outputs


# ---------------------------------------------------------------------------
# trainable wrappers


class Seq2Seq:
    """Encoder-decoder bound to a parameter store, for the training loop."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        if config.is_lm:
            raise ValueError("Seq2Seq needs dec_depth >= 1")
        self.config = config
        self.params = params

    def logits_and_targets(self, batch: SeqBatch, rng=None):
        tgt = np.asarray(batch.target)
        memory = encode(self.config, self.params, batch.source, rng=rng)
        logits = decode(self.config, self.params, tgt[:, :-1], memory, batch.source, rng=rng)
        return logits, tgt[:, 1:]

    def block_prefixes(self) -> list[str]:
        return block_prefixes(self.config)


class CausalLM:
    """Decoder-only language model bound to a parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore):
        if not config.is_lm:
            raise ValueError("CausalLM needs dec_depth == 0")
        self.config = config
        self.params = params

    def logits_and_targets(self, tokens: np.ndarray, rng=None):
        tokens = np.asarray(tokens)
        return lm_logits(self.config, self.params, tokens[:, :-1], rng=rng), tokens[:, 1:]

    def block_prefixes(self) -> list[str]:
        return block_prefixes(self.config)
