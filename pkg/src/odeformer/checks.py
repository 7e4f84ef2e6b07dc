"""Finite-difference and closed-form checks shared by the test-suite and the CLI."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import BlockState, SublayerSpec, block_forward, init_sublayer, init_variant, linear_probe
from .tensor import ParamStore, Tensor, backward, grad_check


def _weighted_sum(y: Tensor) -> Tensor:
    w = Tensor(np.random.default_rng(7).standard_normal(y.shape))
    return T.sum(T.mul(y, w))


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def primitive_cases() -> dict[str, Callable]:
    """``name -> build(rng) -> (loss_fn, x)`` for every differentiable primitive."""
    cases = {}

    def unary(name, fn, shape=(3, 4)):
        def build(rng):
            return (lambda x: _weighted_sum(fn(x))), _rand(rng, *shape)
        cases[name] = build

    unary("relu", T.relu)
    unary("sigmoid", T.sigmoid)
    unary("tanh", T.tanh)
    unary("softmax", T.softmax, (2, 3, 5))
    unary("scalar_mul", lambda x: T.scalar_mul(x, -1.7))
    unary("add_scalar", lambda x: T.add_scalar(x, 0.3))
    unary("transpose", T.transpose, (2, 3, 4))
    unary("swapaxes", lambda x: T.swapaxes(x, 0, 1), (2, 3, 4))
    unary("reshape", lambda x: T.reshape(x, (6, 2)))
    unary("clip", lambda x: T.clip(x, -0.5, 0.5))
    unary("sum", lambda x: T.scalar_mul(T.sum(x), 1.0))
    unary("mean", lambda x: T.scalar_mul(T.mean(x), 1.0))
    unary("take", lambda x: T.take(x, 2), (5,))
    unary("masked_fill", lambda x: T.masked_fill(x, np.array([True, False, True, False]), -3.0))
    unary("dropout", lambda x: T.dropout(x, 0.4, np.random.default_rng(3)))

    def binary(name, fn, sa, sb, which):
        def build(rng):
            a, b = _rand(rng, *sa), _rand(rng, *sb)
            if which == 0:
                return (lambda x: _weighted_sum(fn(x, b))), a
            return (lambda x: _weighted_sum(fn(a, x))), b
        cases[f"{name}[{which}]"] = build

    for w in (0, 1):
        binary("add", T.add, (2, 3, 4), (2, 3, 4), w)
        binary("add_bias", T.add, (2, 3, 4), (4,), w)
        binary("sub", T.sub, (2, 3, 4), (2, 3, 4), w)
        binary("sub_bias", T.sub, (2, 3, 4), (4,), w)
        binary("mul", T.mul, (3, 4), (3, 4), w)
        binary("matmul", T.matmul, (2, 3, 4), (4, 5), w)
        binary("matmul_batched", T.matmul, (2, 3, 4), (2, 4, 5), w)
        binary("scale", T.scale, (3, 4), (1,), w)
        binary("rowscale", T.rowscale, (2, 3, 4), (2, 3, 1), w)

    def concat_case(which):
        def build(rng):
            a, b = _rand(rng, 2, 3), _rand(rng, 2, 4)
            if which == 0:
                return (lambda x: _weighted_sum(T.concat([x, b]))), a
            return (lambda x: _weighted_sum(T.concat([a, x]))), b
        cases[f"concat[{which}]"] = build

    concat_case(0)
    concat_case(1)

    def ln_case(which):
        def build(rng):
            args = [_rand(rng, 2, 3, 5), _rand(rng, 5), _rand(rng, 5)]

            def f(v):
                a = list(args)
                a[which] = v
                return _weighted_sum(T.layer_norm(*a, eps=1e-6))
            return f, args[which]
        cases[f"layer_norm[{which}]"] = build

    for w in range(3):
        ln_case(w)

    def emb(rng):
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        return (lambda t: _weighted_sum(T.embedding_lookup(t, ids))), _rand(rng, 6, 3)
    cases["embedding_lookup"] = emb

    def xent(rng):
        targets = np.array([[0, 4, 2], [1, 1, 3]])
        ignore = np.array([[False, False, True], [False, False, False]])
        loss = lambda x: _weighted_sum(T.softmax_cross_entropy(x, targets, 0.1, ignore))
        return loss, _rand(rng, 2, 3, 5)
    cases["softmax_cross_entropy"] = xent
    return cases


def primitive_error(name: str, seed: int = 0, eps: float = 1e-5) -> float:
    f, x = primitive_cases()[name](np.random.default_rng(seed))
    return grad_check(f, x, eps=eps)


def _ffn_stage(d=4, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    spec = SublayerSpec("FFN", d, ffn_dim=2 * d)
    p = init_sublayer(spec, store, "s", rng)
    for t in p.values():
        if t.ndim == 2:
            t.data *= scale
    return store, (lambda y: B.sublayer_f(spec, p, y))


def variant_errors(tag: str, seed: int = 16, eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error of one block variant w.r.t. its input, a sublayer
    weight and each coefficient tensor (coefficients perturbed away from their init)."""
    rng = np.random.default_rng(seed)
    store, f = _ffn_stage()
    variant = init_variant(tag, None, "coef", 4, 0)
    for t in variant.coeffs.values():
        if t.size > 1:
            t.data += rng.standard_normal(t.shape) * 0.3
    y0 = Tensor(rng.standard_normal((2, 3, 4)))
    w = Tensor(rng.standard_normal(y0.shape))

    def loss(x):
        state = BlockState(y0=y0, y_prev=y0, history=()) if tag in B.HISTORY_TAGS else None
        out, _ = block_forward(variant, f, x, state)
        return T.sum(T.mul(out, w))

    y = Tensor(rng.standard_normal((2, 3, 4)))
    errors = {"input": grad_check(loss, y, eps=eps),
              "weight": grad_check(lambda _: loss(y), store["s.w1"], eps=eps)}
    for name, t in variant.coeffs.items():
        errors[name] = grad_check(lambda _: loss(y), t, eps=eps)
    return errors


def autodiff_depth_gradient(tag: str, c: float, n: int) -> float:
    """d y_{t+n} / d y_t through ``n`` linear-probe blocks, by reverse-mode autodiff."""
    y_t = Tensor(np.array([[[1.0]]]), requires_grad=True)
    v = init_variant(tag, None, "coef", 1, 0)
    y = y_t
    for _ in range(n):
        y, _ = block_forward(v, linear_probe(c), y)
    backward(T.sum(y))
    return float(y_t.grad.reshape(()))


def depth_gradient_grid(tags=("RK2", "RK2GammaOne"), cs=(0.01, 0.1, 0.5), gaps=range(1, 9), depth=8):
    """Rows ``(tag, c, gap, autodiff, analytic, rel_error)``."""
    rows = []
    for tag in tags:
        for c in cs:
            for n in gaps:
                expected = B.analytic_depth_gradient(tag, c, depth, depth - n)
                got = autodiff_depth_gradient(tag, c, n)
                rows.append((tag, c, n, got, expected, abs(got - expected) / abs(expected)))
    return rows
