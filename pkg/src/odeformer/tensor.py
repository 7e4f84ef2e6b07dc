"""Dense tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled), the primitive appends an entry to the
computation tape: a monotonically numbered op holding its inputs and a
backward rule. :func:`backward` gathers the ops reachable from a scalar loss,
replays them in reverse record order, and then drops the tape.

Broadcasting is deliberately narrow: ``add``/``sub`` accept a 1-D bias over
the last axis, ``scale`` multiplies by a one-element tensor and ``rowscale``
by a per-row factor of shape ``x.shape[:-1] + (1,)``. Every other binary op
requires identical shapes.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DetachedGraphError, DimensionError, NumericalOverflowError

_counter = itertools.count()
_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class _Op:
    __slots__ = ("index", "name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.index = next(_counter)
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._op: Optional[_Op] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalOverflowError(f"{name}: non-finite output", stage=name)
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = _Op(name, tuple(inputs), out, backward)
    return out


# ---------------------------------------------------------------------------
# tape and backward


class ComputationTape:
    """Ops reachable from one output, in record order."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def collect(cls, output: Tensor) -> "ComputationTape":
        seen = set()
        ops = []
        stack = [output]
        while stack:
            t = stack.pop()
            op = t._op
            if op is None or id(op) in seen:
                continue
            seen.add(id(op))
            ops.append(op)
            stack.extend(op.inputs)
        ops.sort(key=lambda o: o.index)
        return cls(ops)

    def __len__(self):
        return len(self.ops)

    def discard(self):
        for op in self.ops:
            op.output._op = None
        self.ops = []


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; the tape is discarded afterwards.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._op is None:
        raise DetachedGraphError("loss was not produced by a recorded operation")
    tape = ComputationTape.collect(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = pending.pop(id(op.output), None)
        if g is None:
            continue
        op.output.grad = g
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._op is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    tape.discard()


# ---------------------------------------------------------------------------
# elementwise


def _bias_pair(a: Tensor, b: Tensor, name: str) -> Optional[bool]:
    """None if shapes match, True if ``b`` is a last-axis bias of ``a``."""
    if a.shape == b.shape:
        return None
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim > 1:
        a, b = b, a
    bias = _bias_pair(a, b, "add")
    if bias:
        n = b.shape[0]
        return _result("add", a.data + b.data, (a, b),
                       lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _bias_pair(a, b, "sub")
    if bias:
        n = b.shape[0]
        return _result("sub", a.data - b.data, (a, b),
                       lambda g: (g, -g.reshape(-1, n).sum(axis=0)))
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scalar_mul", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _result("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """``x`` times a one-element tensor ``s`` (a learnable scalar)."""
    if s.size != 1:
        raise DimensionError(f"scale: factor must have one element, got shape {s.shape}")
    xd = x.data
    sv = s.data.reshape(())
    shape = s.shape
    return _result("scale", xd * sv, (x, s),
                   lambda g: (g * sv, np.sum(g * xd).reshape(shape)))


def rowscale(x: Tensor, r: Tensor) -> Tensor:
    """``x`` times a per-row factor ``r`` of shape ``x.shape[:-1] + (1,)``."""
    if r.shape != x.shape[:-1] + (1,):
        raise DimensionError(f"rowscale: factor shape {r.shape} does not fit {x.shape}")
    xd, rd = x.data, r.data
    return _result("rowscale", xd * rd, (x, r),
                   lambda g: (g * rd, np.sum(g * xd, axis=-1, keepdims=True)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True; ``mask`` broadcasts to ``x``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask shape {mask.shape} does not fit {x.shape}") from None
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise DimensionError(f"masked_fill: mask shape {mask.shape} does not fit {x.shape}")
    keep = ~mask
    out = np.where(mask, x.dtype.type(value), x.data)
    return _result("masked_fill", out, (x,), lambda g: (g * keep,))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result("sum", np.sum(x.data), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result("mean", np.mean(x.data), (x,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result("swapaxes", np.swapaxes(x.data, a, b), (x,),
                   lambda g: (np.swapaxes(g, a, b),))


def take(x: Tensor, i: int) -> Tensor:
    """Entry ``i`` of a 1-D tensor, as shape ``(1,)``."""
    if x.ndim != 1 or not -x.shape[0] <= i < x.shape[0]:
        raise DimensionError(f"take: index {i} invalid for shape {x.shape}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[i] = g[0]
        return (gx,)

    return _result("take", x.data[i:i + 1 if i != -1 else None].copy(), (x,), back)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")
    return swapaxes(x, -1, -2)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat: shapes {xs[0].shape} and {x.shape} differ before the last axis"
            )
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return _result("concat", np.concatenate([x.data for x in xs], axis=-1), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=-1)))


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[..., k, n]`` with equal leading axes, or ``b`` a 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ in {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if b.ndim == 2:
        k, n = bd.shape

        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def back(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result("matmul", out, (a, b), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result("softmax", y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, np.sum(flat_g * xhat.reshape(-1, d), axis=0), flat_g.sum(axis=0)

    return _result("layer_norm", xhat * gd + bias.data, (x, gain, bias), back)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}"
        )
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _result("embedding_lookup", table.data[ids], (table,), back)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, smoothing: float = 0.0,
                          ignore: Optional[np.ndarray] = None) -> Tensor:
    """Per-position label-smoothed negative log-likelihood.

    Returns a tensor of shape ``targets.shape``:
    ``(1 - s) * nll(target) + s * mean_v nll(v)``. Positions where ``ignore``
    is True contribute 0 and receive no gradient.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(
            f"cross entropy: logits {logits.shape} do not match targets {targets.shape}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll_t = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    nll_u = -logp.mean(axis=-1)
    s = logits.dtype.type(smoothing)
    loss = (1 - s) * nll_t + s * nll_u
    keep = np.ones(targets.shape, dtype=logits.dtype) if ignore is None else (~np.asarray(ignore)).astype(logits.dtype)
    loss = loss * keep

    def back(g):
        p = np.exp(logp)
        q = np.full(p.shape, s / v, dtype=p.dtype)
        np.put_along_axis(q, targets[..., None],
                          np.take_along_axis(q, targets[..., None], axis=-1) + (1 - s), axis=-1)
        return (((p - q) * (g * keep)[..., None]),)

    return _result("softmax_cross_entropy", loss, (logits,), back)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative gap between the analytic gradient and central differences.

    ``f`` must map ``x`` (possibly through closures over other tensors) to a
    scalar. The error of each component is ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    if out._op is not None:
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("grad_check needs contiguous tensor data")
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# parameters


_DTYPE_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_MAGIC = "ODEFMT1"


class ParamStore:
    """Named learnable tensors, iterated in lexicographic name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, dtype=None) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter names may not contain whitespace: {name!r}")
        t = Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def get(self, name: str, default=None):
        return self._params.get(name, default)

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by the remainder of the name."""
        head = prefix + "."
        return {n[len(head):]: t for n, t in self._params.items() if n.startswith(head)}

    def num_parameters(self, prefix: Optional[str] = None) -> int:
        return int(np.sum([t.size for n, t in self._params.items()
                           if prefix is None or n.startswith(prefix)], dtype=np.int64))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict) -> None:
        for n, arr in state.items():
            t = self._params[n]
            if t.shape != np.shape(arr):
                raise DimensionError(f"{n}: stored shape {np.shape(arr)} != {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write((_MAGIC + "\n").encode())
            for name, t in self.items():
                tag = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}.get(t.dtype)
                if tag is None:
                    raise ValueError(f"{name}: unsupported dtype {t.dtype}")
                header = " ".join([name, tag, str(t.ndim)] + [str(d) for d in t.shape])
                fh.write((header + "\n").encode())
                fh.write(np.ascontiguousarray(t.data, dtype=_DTYPE_TAGS[tag]).tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        with open(path, "rb") as fh:
            if fh.readline().decode().rstrip("\n") != _MAGIC:
                raise ValueError(f"{path}: not an {_MAGIC} checkpoint")
            while True:
                line = fh.readline()
                if not line:
                    break
                parts = line.decode().split()
                name, tag, rank = parts[0], parts[1], int(parts[2])
                dims = tuple(int(d) for d in parts[3:3 + rank])
                dt = _DTYPE_TAGS[tag]
                count = int(np.prod(dims, dtype=np.int64))
                raw = fh.read(count * dt.itemsize)
                arr = np.frombuffer(raw, dtype=dt).reshape(dims)
                store.add(name, arr.astype(dt.newbyteorder("=")))
        return store


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return float(np.sqrt(total))
