"""Float64 tensors with tape-based reverse-mode differentiation.

Every op records a closure that maps the output gradient to gradients for its
inputs. ``backward`` walks the recorded graph in reverse topological order.
Only the ops the toy transformer and the loss algebra need are provided, and
broadcasting is limited to numpy's rules with gradient reduction back to the
input shape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, UsageError

_U64 = (1 << 64) - 1
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """Dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError("item() on a non-scalar tensor")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _wrap(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(values: np.ndarray) -> Tensor:
    # internal constructor; skips the copy made by np.array
    t = Tensor.__new__(Tensor)
    t.values = values
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.name = None
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(values).all():
        raise NumericError("operation produced non-finite values")
    out = _wrap(values)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if np.any(bv == 0):
        raise NumericError("division by zero")
    out = av / bv
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    if np.any(xv <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.values < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(x.values)
    if np.any(out == 0):
        raise NumericError("sqrt gradient undefined at zero")
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    keep = x.values > 0
    return _result(np.where(keep, x.values, 0.0), (x,), lambda g: (g * keep,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.values >= floor
    return _result(np.maximum(x.values, floor), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape / reduce


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.values.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    if bv.ndim == 2:
        def bw(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return ga, gb

    return _result(av @ bv, (a, b), bw)


# ---------------------------------------------------------------- neural primitives


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis."""
    if x.shape[-1] < 1:
        raise UsageError("softmax over an empty axis")
    if not np.isfinite(x.values).all():
        raise NumericError("softmax input is not finite")
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), bw)


def _rowsum(x: np.ndarray) -> np.ndarray:
    # sum over the last axis, keepdims; BLAS beats ufunc.reduce on tiny arrays
    return x @ np.ones((x.shape[-1], 1))


def _colsum(x2: np.ndarray) -> np.ndarray:
    return np.ones(x2.shape[0]) @ x2


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.values
    d = xv.shape[-1]
    inv_d = 1.0 / d
    xc = xv - _rowsum(xv) * inv_d
    rstd = 1.0 / np.sqrt(_rowsum(xc * xc) * inv_d + eps)
    xhat = xc * rstd
    gv = gamma.values

    def bw(g):
        gx = g * gv
        dx = rstd * (gx - _rowsum(gx) * inv_d - xhat * (_rowsum(gx * xhat) * inv_d))
        g2 = g.reshape(-1, d)
        return dx, _colsum(g2 * xhat.reshape(-1, d)), _colsum(g2)

    return _result(xhat * gv + beta.values, (x, gamma, beta), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) for x of shape [..., k] and a 2-D weight."""
    xv, wv = x.values, w.values
    lead = xv.shape[:-1]
    x2 = xv.reshape(-1, xv.shape[-1])
    out = x2 @ wv
    if b is not None:
        out += b.values

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wv.T).reshape(*lead, wv.shape[0])
        gw = x2.T @ g2
        return (gx, gw) if b is None else (gx, gw, _colsum(g2))

    return _result(out.reshape(*lead, wv.shape[1]), (x, w) if b is None else (x, w, b), bw)


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on projected inputs.

    ``q`` is [B, Tq, d]; ``k`` and ``v`` are [B, Tk, d]; ``bias`` broadcasts
    to [B, H, Tq, Tk] and carries the padding/causal masks as large negatives.
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.values.reshape(b, tq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.values.reshape(b, tk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.values.reshape(b, tk, n_heads, dh).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale + bias
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= _rowsum(p)
    ctx = p @ vh
    out = ctx.transpose(0, 2, 1, 3).reshape(b, tq, d)

    def bw(g):
        gc = g.reshape(b, tq, n_heads, dh).transpose(0, 2, 1, 3)
        gp = gc @ vh.transpose(0, 1, 3, 2)
        gv = p.transpose(0, 1, 3, 2) @ gc
        gs = p * (gp - _rowsum(gp * p)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(b, n, d)  # noqa: E731
        return merge(gq, tq), merge(gk, tk), merge(gv, tk)

    return _result(out, (q, k, v), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise UsageError("embedding id out of range")

    def bw(g):
        gw = np.zeros_like(weight.values)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.values[ids], (weight,), bw)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter back."""
    return embedding(x, rows)


def unfold_time(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """[B, T, C] -> [B, T_out, kernel*C] sliding windows over a zero-padded time axis."""
    b, t, c = x.shape
    t_out = (t + 2 * pad - kernel) // stride + 1
    if t_out < 1:
        raise UsageError("sequence too short for the convolution window")
    idx = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    xp = np.zeros((b, t + 2 * pad, c))
    xp[:, pad:pad + t] = x.values
    out = xp[:, idx, :].reshape(b, t_out, kernel * c)

    def bw(g):
        gp = np.zeros_like(xp)
        np.add.at(gp, (slice(None), idx), g.reshape(b, t_out, kernel, c))
        return (gp[:, pad:pad + t],)

    return _result(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked token NLL: mean over each sequence's valid positions, then over the batch.

    ``logits`` is [B, T, V]; ``targets`` and ``mask`` are [B, T].
    """
    lv = logits.values
    v = lv.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    picked = targets[mask]
    if picked.size and (picked.min() < 0 or picked.max() >= v):
        raise UsageError("target id out of vocabulary range")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise UsageError("sequence with no valid target positions")
    w = mask / counts[:, None] / mask.shape[0]
    safe_t = np.where(mask, targets, 0)
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - np.take_along_axis(z, safe_t[..., None], axis=-1)[..., 0]
    loss = np.asarray((w * nll).sum())

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, safe_t[..., None],
                          np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        return (g * w[..., None] * p,)

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------- randomness


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id, call index).

    Each call to :meth:`generator` hands out a Philox generator positioned at a
    fresh counter block, so the draws of call ``n`` never depend on how many
    numbers earlier calls consumed.
    """

    __slots__ = ("seed", "stream_id", "calls")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        self.calls = 0

    def generator(self, call: int | None = None) -> np.random.Generator:
        if call is None:
            call = self.calls
            self.calls += 1
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, 0, call, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def child(self, *keys: int) -> "RngStream":
        entropy = [self.seed, self.stream_id, *[int(k) & _U64 for k in keys]]
        sid = np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0]
        return RngStream(self.seed, int(sid))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, calls={self.calls})"


def dropout_mask(shape: Sequence[int], p: float, rng: RngStream) -> np.ndarray:
    """Scaled keep-mask; each element survives with probability 1 - p."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    n = int(np.prod(shape))
    raw = rng.generator().bit_generator.random_raw((n + 1) // 2)
    u32 = raw.astype("<u8").view("<u4")[:n].reshape(shape)
    keep = u32 >= np.uint32(min(int(p * 2.0**32), 2**32 - 1))
    return keep * (1.0 / (1.0 - p))


def apply_mask(x: Tensor, scaled_mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (already scaled) dropout mask."""
    return _result(x.values * scaled_mask, (x,), lambda g: (g * scaled_mask,))


def dropout(x: Tensor, p: float, rng: RngStream) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    return apply_mask(x, dropout_mask(x.shape, p, rng))


# ---------------------------------------------------------------- differentiation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor in the graph."""
    if loss.values.size != 1:
        raise UsageError("backward() requires a scalar loss")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def check_gradients(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    eps: float = 1e-6,
    max_per_leaf: int | None = None,
    seed: int = 0,
) -> float:
    """Max over checked elements of |analytic - central difference| / max(1, |analytic|).

    ``f`` must rebuild its graph from ``leaves`` on every call. With
    ``max_per_leaf`` set, a seeded subset of each larger leaf is probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError("eps must lie in [1e-7, 1e-3]")
    leaves = list(leaves)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    loss = f()
    backward(loss)
    picker = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros_like(leaf.values) if leaf.grad is None else leaf.grad
        flat = leaf.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_leaf is not None and flat.size > max_per_leaf:
            idx = np.sort(picker.choice(flat.size, size=max_per_leaf, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update. Missing gradients count as zero."""
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.values.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        elif m.shape != p.values.shape:
            raise UsageError(f"optimizer state shape mismatch for {name}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
