"""Residual-integration rules over Transformer sublayers.

A block maps ``y_t`` to ``y_{t+1}`` using a stage function ``f`` (the
pre-norm sublayer increment). Every internal stage of a block calls the
same ``f`` with the same parameters; only the combination coefficients
differ between variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, StateError
from .ode_core import RK2 as _RK2_TABLE, RK4 as _RK4_TABLE, RkScheme
from .tensor import ParamStore, Tensor

StageFn = Callable[[Tensor], Tensor]

TAGS = (
    "Euler", "RK2", "RK2GammaOne", "RK2LearnableScalar", "RK2GatedSigmoid",
    "RK2GatedSigmoidPair", "RK2Tanh", "RK4", "Leapfrog", "Multistep", "DLCL", "PolyNet",
)
_BY_LOWER = {t.lower(): t for t in TAGS}

STAGE_COUNT = {
    "Euler": 1, "RK2": 2, "RK2GammaOne": 2, "RK2LearnableScalar": 2,
    "RK2GatedSigmoid": 2, "RK2GatedSigmoidPair": 2, "RK2Tanh": 2, "RK4": 4,
    "Leapfrog": 1, "Multistep": 1, "DLCL": 1, "PolyNet": 2,
}
HISTORY_TAGS = frozenset({"Leapfrog", "Multistep", "DLCL"})
MASK_FILL = -1e9


def parse_variant(name: str) -> str:
    """Canonical tag for a case-insensitive variant name."""
    try:
        return _BY_LOWER[str(name).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown block variant {name!r}; expected one of {TAGS}") from None


# ---------------------------------------------------------------------------
# sublayers


@dataclass(frozen=True)
class SublayerSpec:
    kind: str  # "SAN" or "FFN"
    d_model: int
    heads: int = 1
    ffn_dim: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in ("SAN", "FFN"):
            raise ValueError(f"sublayer kind must be SAN or FFN, got {self.kind!r}")
        if self.kind == "SAN" and (self.heads < 1 or self.d_model % self.heads):
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.kind == "FFN" and self.ffn_dim < self.d_model:
            raise ValueError(f"ffn_dim {self.ffn_dim} must be >= d_model {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _xavier(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_sublayer(spec: SublayerSpec, store: ParamStore, prefix: str,
                  rng: np.random.Generator, dtype=np.float64,
                  zero_output: bool = False) -> dict[str, Tensor]:
    """Register the parameters of one sublayer under ``prefix``."""
    d = spec.d_model
    store.add(f"{prefix}.ln.gain", np.ones(d, dtype))
    store.add(f"{prefix}.ln.bias", np.zeros(d, dtype))
    if spec.kind == "SAN":
        for name in ("q", "k", "v"):
            store.add(f"{prefix}.w{name}", _xavier(rng, d, d, dtype))
            store.add(f"{prefix}.b{name}", np.zeros(d, dtype))
        wo = np.zeros((d, d), dtype) if zero_output else _xavier(rng, d, d, dtype)
        store.add(f"{prefix}.wo", wo)
        store.add(f"{prefix}.bo", np.zeros(d, dtype))
    else:
        store.add(f"{prefix}.w1", _xavier(rng, d, spec.ffn_dim, dtype))
        store.add(f"{prefix}.b1", np.zeros(spec.ffn_dim, dtype))
        w2 = np.zeros((spec.ffn_dim, d), dtype) if zero_output else _xavier(rng, spec.ffn_dim, d, dtype)
        store.add(f"{prefix}.w2", w2)
        store.add(f"{prefix}.b2", np.zeros(d, dtype))
    return store.scope(prefix)


def _check_mask(mask: np.ndarray, b: int, heads: int, lq: int, lk: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    target = (b, heads, lq, lk)
    ok = mask.ndim == 4 and all(m in (1, t) for m, t in zip(mask.shape, target))
    if not ok:
        raise DimensionError(f"attention mask shape {mask.shape} does not fit scores {target}")
    return mask


def attention(params: Mapping[str, Tensor], x: Tensor, kv: Tensor,
              mask: Optional[np.ndarray], heads: int, dropout: float = 0.0,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Multi-head attention; ``mask`` is True where a query may attend a key."""
    b, lq, d = x.shape
    lk = kv.shape[1]
    dh = d // heads

    def split(t, n):
        return T.swapaxes(T.reshape(t, (b, n, heads, dh)), 1, 2)

    q = split(T.add(T.matmul(x, params["wq"]), params["bq"]), lq)
    k = split(T.add(T.matmul(kv, params["wk"]), params["bk"]), lk)
    v = split(T.add(T.matmul(kv, params["wv"]), params["bv"]), lk)
    scores = T.scalar_mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = _check_mask(mask, b, heads, lq, lk)
        scores = T.masked_fill(scores, ~mask, MASK_FILL)
    weights = T.dropout(T.softmax(scores), dropout, rng)
    ctx = T.reshape(T.swapaxes(T.matmul(weights, v), 1, 2), (b, lq, d))
    return T.add(T.matmul(ctx, params["wo"]), params["bo"])


def sublayer_f(spec: SublayerSpec, params: Mapping[str, Tensor], y: Tensor,
               mask: Optional[np.ndarray] = None, *, memory: Optional[Tensor] = None,
               rng: Optional[np.random.Generator] = None, eps: float = 1e-6) -> Tensor:
    """Pre-norm sublayer increment ``G(LN(y))``; the residual is not added.

    With ``memory`` given, a SAN sublayer attends from ``y`` to ``memory``
    (encoder-decoder attention).
    """
    if y.ndim != 3 or y.shape[-1] != spec.d_model:
        raise DimensionError(f"sublayer expects [batch, len, {spec.d_model}], got {y.shape}")
    x = T.layer_norm(y, params["ln.gain"], params["ln.bias"], eps)
    if spec.kind == "SAN":
        kv = x if memory is None else memory
        return attention(params, x, kv, mask, spec.heads, spec.dropout, rng)
    h = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
    h = T.dropout(h, spec.dropout, rng)
    return T.add(T.matmul(h, params["w2"]), params["b2"])


# ---------------------------------------------------------------------------
# block variants


@dataclass
class BlockVariant:
    tag: str
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tag = parse_variant(self.tag)

    @property
    def stages(self) -> int:
        return STAGE_COUNT[self.tag]

    def coefficient_count(self) -> int:
        return int(sum(t.size for t in self.coeffs.values()))


def coefficient_init(tag: str, d_model: int, index: int = 0, dtype=np.float64) -> dict:
    """Initial values of the learnable combination coefficients of one block."""
    tag = parse_variant(tag)
    if tag == "RK2LearnableScalar":
        return {"gamma1": np.ones(1, dtype), "gamma2": np.ones(1, dtype)}
    if tag == "RK2GatedSigmoidPair":
        return {"gate.w": np.zeros(2 * d_model, dtype), "gate.b": np.zeros(1, dtype)}
    if tag == "RK2GatedSigmoid":
        return {f"gate{i}.{p}": (np.zeros(2 * d_model, dtype) if p == "w" else np.zeros(1, dtype))
                for i in (1, 2) for p in ("w", "b")}
    if tag == "RK2Tanh":
        # tanh(b) = 1/2 so training starts from the RK2 combination
        b0 = np.full(1, math.atanh(0.5), dtype)
        return {f"gate{i}.{p}": (np.zeros(2 * d_model, dtype) if p == "w" else b0.copy())
                for i in (1, 2) for p in ("w", "b")}
    if tag == "Multistep":
        return {"k": np.full(1, 0.5, dtype)}
    if tag == "DLCL":
        return {"w": np.full(index + 1, 1.0 / (index + 1), dtype)}
    return {}


def declared_coefficient_count(tag: str, d_model: int, index: int = 0) -> int:
    return int(sum(v.size for v in coefficient_init(tag, d_model, index).values()))


def init_variant(tag: str, store: Optional[ParamStore], prefix: str, d_model: int,
                 index: int = 0, dtype=np.float64) -> BlockVariant:
    """Create a variant, registering its coefficients under ``prefix`` if a store is given."""
    coeffs = {}
    for name, value in coefficient_init(tag, d_model, index, dtype).items():
        if store is None:
            coeffs[name] = Tensor(value, requires_grad=True, name=f"{prefix}.{name}")
        else:
            coeffs[name] = store.add(f"{prefix}.{name}", value)
    return BlockVariant(tag, coeffs)


@dataclass(frozen=True)
class BlockState:
    """Cross-block memory for the multistep variants.

    ``y_prev`` is the previous block input, ``history`` the ``(index, F)``
    pairs of every earlier block, ``y0`` the input of the first block.
    """

    y0: Tensor
    y_prev: Tensor
    history: tuple = ()

    @classmethod
    def start(cls, y0: Tensor) -> "BlockState":
        return cls(y0=y0, y_prev=y0, history=())

    @property
    def t(self) -> int:
        return len(self.history)


def rk2_gate(F1: Tensor, F2: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``sigmoid([F1, F2] . W + b)``, one value per (batch, position)."""
    return T.sigmoid(_gate_logit(F1, F2, W, b))


def _gate_logit(F1, F2, W, b):
    if F1.shape != F2.shape:
        raise DimensionError(f"gate inputs differ: {F1.shape} vs {F2.shape}")
    d2 = 2 * F1.shape[-1]
    if W.size != d2:
        raise DimensionError(f"gate weight has {W.size} entries, expected {d2} for inputs {F1.shape}")
    if b.size != 1:
        raise DimensionError(f"gate bias must be a single value, got shape {b.shape}")
    z = T.matmul(T.concat([F1, F2]), T.reshape(W, (d2, 1)))
    return T.add(z, T.reshape(b, (1,)))


def _rk_stages(table: RkScheme, f: StageFn, y: Tensor) -> list:
    ks = []
    for i in range(table.stages):
        yi = y
        for j in range(i):
            if table.beta[i, j] != 0.0:
                term = ks[j] if table.beta[i, j] == 1.0 else T.scalar_mul(ks[j], table.beta[i, j])
                yi = T.add(yi, term)
        ks.append(f(yi))
    return ks


def _combine(y: Tensor, terms) -> Tensor:
    out = y
    for c, k in terms:
        out = T.add(out, k if c == 1.0 else T.scalar_mul(k, c))
    return out


def block_forward(variant: BlockVariant, f: StageFn, y: Tensor,
                  state: Optional[BlockState] = None):
    """One block step. Returns ``(y_next, new_state)``.

    ``new_state`` is None when no state was supplied to a variant that does
    not need one.
    """
    tag = variant.tag
    c = variant.coeffs
    if tag in HISTORY_TAGS and state is None:
        raise StateError(f"{tag} block needs a BlockState (use BlockState.start(y0))")

    fy = None
    if tag == "Euler":
        fy = f(y)
        out = T.add(y, fy)
    elif tag in ("RK2", "RK2GammaOne", "RK2LearnableScalar", "RK2GatedSigmoid",
                 "RK2GatedSigmoidPair", "RK2Tanh"):
        F1, F2 = _rk_stages(_RK2_TABLE, f, y)
        fy = F1
        if tag == "RK2":
            out = _combine(y, [(0.5, F1), (0.5, F2)])
        elif tag == "RK2GammaOne":
            out = _combine(y, [(1.0, F1), (1.0, F2)])
        elif tag == "RK2LearnableScalar":
            out = T.add(T.add(y, T.scale(F1, c["gamma1"])), T.scale(F2, c["gamma2"]))
        elif tag == "RK2GatedSigmoidPair":
            g = rk2_gate(F1, F2, c["gate.w"], c["gate.b"])
            out = T.add(T.add(y, T.rowscale(F1, g)),
                        T.rowscale(F2, T.add_scalar(T.scalar_mul(g, -1.0), 1.0)))
        else:
            squash = T.sigmoid if tag == "RK2GatedSigmoid" else T.tanh
            g1 = squash(_gate_logit(F1, F2, c["gate1.w"], c["gate1.b"]))
            g2 = squash(_gate_logit(F1, F2, c["gate2.w"], c["gate2.b"]))
            out = T.add(T.add(y, T.rowscale(F1, g1)), T.rowscale(F2, g2))
    elif tag == "RK4":
        ks = _rk_stages(_RK4_TABLE, f, y)
        fy = ks[0]
        out = _combine(y, list(zip(_RK4_TABLE.gamma, ks)))
    elif tag == "PolyNet":
        fy = f(y)
        out = T.add(T.add(y, fy), f(fy))
    elif tag == "Leapfrog":
        fy = f(y)
        out = T.add(state.y_prev, T.scalar_mul(fy, 2.0))
    elif tag == "Multistep":
        fy = f(y)
        k = T.clip(c["k"], 0.0, 1.0)
        one_minus_k = T.add_scalar(T.scalar_mul(k, -1.0), 1.0)
        out = T.add(T.add(T.scale(y, k), T.scale(state.y_prev, one_minus_k)), fy)
    elif tag == "DLCL":
        fy = f(y)
        w = c["w"]
        if w.size != state.t + 1:
            raise StateError(
                f"DLCL block with {w.size} weights called at depth {state.t}"
            )
        fs = [h for _, h in state.history] + [fy]
        out = state.y0
        for i, fi in enumerate(fs):
            out = T.add(out, T.scale(fi, T.take(w, i)))
    else:  # pragma: no cover - parse_variant guards this
        raise ValueError(tag)

    if state is None:
        return out, None
    return out, replace(state, y_prev=y, history=state.history + ((state.t, fy),))


# ---------------------------------------------------------------------------
# linear probe


def linear_probe(c: float) -> StageFn:
    """Stage function ``F(y) = c * y``."""
    return lambda y: T.scalar_mul(y, c)


def analytic_depth_gradient(variant: str, c: float, L: int, t: int) -> float:
    """Closed-form ``d y_L / d y_t`` of a stack of linear-probe blocks.

    RK2 (gamma = 1/2): ``2^-(L-t) * prod (1 + g_k)`` with ``g_k = (1 + c)^2``.
    RK2GammaOne: ``prod g_k``.
    """
    tag = parse_variant(variant)
    if not 0 <= t < L:
        raise ValueError(f"need 0 <= t < L, got t={t}, L={L}")
    g = (1.0 + c) * (1.0 + c)
    n = L - t
    if tag == "RK2":
        return (0.5 ** n) * math.prod([1.0 + g] * n)
    if tag == "RK2GammaOne":
        return math.prod([g] * n)
    raise ValueError(f"closed form only for RK2 and RK2GammaOne, got {tag}")
