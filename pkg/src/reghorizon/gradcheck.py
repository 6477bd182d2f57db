"""Finite-difference self-test over every primitive and every legal loss composition."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .losses import LEGAL_COMBOS, DistanceMetric, LossWeights, distance, masked_mean_pool, total_loss
from .model import Batch, ModelConfig, build
from .numerics import RngStream, Tensor

TOLERANCE = 1e-4


@dataclass
class GradCase:
    name: str
    setup: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
    max_per_leaf: int | None = None


@dataclass
class GradResult:
    name: str
    error: float
    passed: bool
    seconds: float


def _leaf(gen, *shape, low=-3.0, high=3.0) -> Tensor:
    return Tensor(gen.uniform(low, high, size=shape), requires_grad=True)


def _scalarize(t: Tensor, weights: np.ndarray) -> Tensor:
    # random projection so every output element contributes a distinct gradient
    return nx.sum(nx.mul(t, weights))


def _proj(gen, shape) -> np.ndarray:
    return gen.uniform(-1, 1, size=shape)


def _unary(op):
    def setup(gen):
        x = _leaf(gen, 3, 4)
        w = _proj(gen, (3, 4))
        return (lambda: _scalarize(op(x), w)), [x]
    return setup


def _positive(op):
    def setup(gen):
        x = _leaf(gen, 3, 4, low=0.2, high=3.0)
        w = _proj(gen, (3, 4))
        return (lambda: _scalarize(op(x), w)), [x]
    return setup


def _binary(op, positive_b=False):
    def setup(gen):
        a = _leaf(gen, 2, 3, 4)
        b = _leaf(gen, 3, 4, low=0.5 if positive_b else -3.0)
        w = _proj(gen, (2, 3, 4))
        return (lambda: _scalarize(op(a, b), w)), [a, b]
    return setup


def _matmul(gen):
    a, b = _leaf(gen, 2, 3, 4), _leaf(gen, 2, 4, 5)
    w = _proj(gen, (2, 3, 5))
    return (lambda: _scalarize(nx.matmul(a, b), w)), [a, b]


def _linear(gen):
    x, wt, b = _leaf(gen, 2, 3, 4), _leaf(gen, 4, 5), _leaf(gen, 5)
    w = _proj(gen, (2, 3, 5))
    return (lambda: _scalarize(nx.linear(x, wt, b), w)), [x, wt, b]


def _layer_norm(gen):
    x, g, b = _leaf(gen, 2, 3, 5), _leaf(gen, 5), _leaf(gen, 5)
    w = _proj(gen, (2, 3, 5))
    return (lambda: _scalarize(nx.layer_norm(x, g, b), w)), [x, g, b]


def _embedding(gen):
    table = _leaf(gen, 6, 4)
    ids = gen.integers(0, 6, size=(2, 5))
    w = _proj(gen, (2, 5, 4))
    return (lambda: _scalarize(nx.embedding(table, ids), w)), [table]


def _softmax(gen):
    x = _leaf(gen, 3, 5)
    w = _proj(gen, (3, 5))
    return (lambda: _scalarize(nx.softmax_lastdim(x), w)), [x]


def _dropout(gen):
    x = _leaf(gen, 3, 6)
    mask = nx.dropout_mask(x.shape, 0.3, RngStream(7, 1))
    w = _proj(gen, (3, 6))
    return (lambda: _scalarize(nx.apply_mask(x, mask), w)), [x]


def _cross_entropy(gen):
    logits = _leaf(gen, 2, 4, 6)
    targets = gen.integers(0, 6, size=(2, 4))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    return (lambda: nx.cross_entropy(logits, targets, mask)), [logits]


def _attention(gen):
    q, k, v = _leaf(gen, 2, 3, 4), _leaf(gen, 2, 5, 4), _leaf(gen, 2, 5, 4)
    key_mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], dtype=bool)
    bias = np.where(key_mask[:, None, None, :], 0.0, -1e9)
    w = _proj(gen, (2, 3, 4))
    return (lambda: _scalarize(nx.attention_core(q, k, v, bias, 2), w)), [q, k, v]


def _causal_attention(gen):
    x = _leaf(gen, 2, 4, 4)
    bias = np.triu(np.full((4, 4), -1e9), k=1)[None, None]
    w = _proj(gen, (2, 4, 4))
    return (lambda: _scalarize(nx.attention_core(x, x, x, bias, 2), w)), [x]


def _conv(gen):
    x = _leaf(gen, 2, 6, 2)
    wt = _leaf(gen, 10, 3)
    w = _proj(gen, (2, 3, 3))
    return (lambda: _scalarize(nx.linear(nx.unfold_time(x, 5, 2, 2), wt), w)), [x, wt]


def _reduce(gen):
    x = _leaf(gen, 2, 3, 4)
    w = _proj(gen, (2, 4))
    return (lambda: nx.add(_scalarize(nx.sum(x, axis=1), w), nx.mean(x))), [x]


def _reshape(gen):
    x = _leaf(gen, 2, 3, 4)
    w = _proj(gen, (4, 2, 3))
    return (lambda: _scalarize(nx.reshape(nx.transpose(x, (2, 0, 1)), (4, 2, 3)), w)), [x]


def _dist(metric, probs=False):
    def setup(gen):
        raw_a, raw_b = _leaf(gen, 2, 3, 5), _leaf(gen, 2, 3, 5)
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)

        def f():
            a = nx.softmax_lastdim(raw_a) if probs else raw_a
            b = nx.softmax_lastdim(raw_b) if probs else raw_b
            return distance(metric, a, b, mask)
        return f, [raw_a, raw_b]
    return setup


def _pool(gen):
    x = _leaf(gen, 2, 4, 3)
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    w = _proj(gen, (2, 3))
    return (lambda: _scalarize(masked_mean_pool(x, mask), w)), [x]


def _buggy_square(gen):
    """Deliberately wrong backward (d/dx x^2 reported as x); must fail the check."""
    x = _leaf(gen, 3, 3)
    w = _proj(gen, (3, 3))

    def f():
        out = nx._result(x.values ** 2, (x,), lambda g: (g * x.values,))
        return _scalarize(out, w)
    return f, [x]


PRIMITIVES: list[GradCase] = [
    GradCase("add", _binary(nx.add)),
    GradCase("sub", _binary(nx.sub)),
    GradCase("mul", _binary(nx.mul)),
    GradCase("div", _binary(nx.div, positive_b=True)),
    GradCase("exp", _unary(nx.exp)),
    GradCase("log", _positive(nx.log)),
    GradCase("sqrt", _positive(nx.sqrt)),
    GradCase("relu", _unary(nx.relu)),
    GradCase("clamp_min", _unary(lambda x: nx.clamp_min(x, 0.5))),
    GradCase("matmul", _matmul),
    GradCase("linear", _linear),
    GradCase("sum_mean", _reduce),
    GradCase("reshape_transpose", _reshape),
    GradCase("layer_norm", _layer_norm),
    GradCase("embedding", _embedding),
    GradCase("softmax", _softmax),
    GradCase("dropout_fixed_mask", _dropout),
    GradCase("cross_entropy", _cross_entropy),
    GradCase("attention_padding", _attention),
    GradCase("attention_causal", _causal_attention),
    GradCase("conv_subsample", _conv),
    GradCase("masked_mean_pool", _pool),
    GradCase("distance_mse", _dist(DistanceMetric.MSE)),
    GradCase("distance_cos", _dist(DistanceMetric.COS)),
    GradCase("distance_kl", _dist(DistanceMetric.KL, probs=True)),
]

BUGGY = GradCase("injected_bug", _buggy_square)

GRADCHECK_MODEL = ModelConfig(vocab_size=8, d_model=8, n_heads=2, enc_layers=2, dec_layers=2,
                              ffn_dim=8, dropout=0.2, frame_dim=2, subsample_stride=2)


def toy_batch(gen: np.random.Generator, cfg: ModelConfig = GRADCHECK_MODEL) -> Batch:
    """Two samples of different lengths, so padding masks are exercised."""
    lengths = [3, 2]
    fpt = 4
    b, tt, ty = 2, max(lengths), max(lengths) + 1
    speech = np.zeros((b, tt * fpt, cfg.frame_dim))
    smask = np.zeros((b, tt * fpt), dtype=bool)
    src = np.zeros((b, tt), dtype=np.int64)
    src_mask = np.zeros((b, tt), dtype=bool)
    tin = np.zeros((b, ty), dtype=np.int64)
    tout = np.zeros((b, ty), dtype=np.int64)
    tmask = np.zeros((b, ty), dtype=bool)
    for i, n in enumerate(lengths):
        toks = gen.integers(3, cfg.vocab_size, size=n)
        speech[i, :n * fpt] = gen.uniform(-3, 3, size=(n * fpt, cfg.frame_dim))
        smask[i, :n * fpt] = True
        src[i, :n] = toks
        src_mask[i, :n] = True
        tin[i, :n + 1] = [1, *toks]
        tout[i, :n + 1] = [*toks, 2]
        tmask[i, :n + 1] = True
    return Batch(speech, smask, src, src_mask, tin, tout, tmask)


def _loss_case(tap, metric) -> GradCase:
    def setup(gen):
        model = build(GRADCHECK_MODEL, RngStream(int(gen.integers(1 << 31)), 3))
        batch = toy_batch(gen)
        weights = LossWeights(alpha_t=0.7, alpha_cr=1.3, alpha_rd=0.9, cr_tap=tap,
                              cr_metric=metric, rd_tap=tap, rd_metric=metric)

        def f():
            return total_loss(weights, batch, model, RngStream(5, 9)).loss
        return f, list(model.params.values())
    return GradCase(f"total_loss[{tap.value}-{metric.value}]", setup, max_per_leaf=2)


LOSS_CASES: list[GradCase] = [_loss_case(t, m) for t, m in LEGAL_COMBOS]


def run_case(case: GradCase, seed: int = 0, eps: float = 1e-6) -> GradResult:
    gen = np.random.default_rng(seed)
    start = time.perf_counter()
    f, leaves = case.setup(gen)
    err = nx.check_gradients(f, leaves, eps=eps, max_per_leaf=case.max_per_leaf, seed=seed)
    return GradResult(case.name, err, err <= TOLERANCE, time.perf_counter() - start)


def run_suite(include_losses: bool = True, inject_bug: bool = False,
              seed: int = 0) -> list[GradResult]:
    cases = list(PRIMITIVES)
    if include_losses:
        cases += LOSS_CASES
    if inject_bug:
        cases.append(BUGGY)
    return [run_case(c, seed) for c in cases]


def format_table(results: list[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
