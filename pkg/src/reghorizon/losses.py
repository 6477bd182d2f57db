"""Multi-task loss algebra: cross-entropy for both branches plus the two consistency terms.

The consistency term compares speech- and text-branch representations of the
same example; the R-drop term compares two dropout-perturbed speech passes.
Both pick one tap point and one distance.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NumericError, UsageError
from .model import Batch, Model, TapBundle, forward_speech, forward_text
from .numerics import RngStream, Tensor

KL_FLOOR = 1e-12


class DistanceMetric(str, enum.Enum):
    MSE = "mse"
    COS = "cos"
    KL = "kl"


class TapPoint(str, enum.Enum):
    ENC = "enc"
    XATTN = "xattn"
    LDS = "lds"
    LOGITS = "logits"
    SOFTMAX = "softmax"


LEGAL_COMBOS: tuple[tuple[TapPoint, DistanceMetric], ...] = tuple(
    [(t, m) for t in TapPoint for m in (DistanceMetric.MSE, DistanceMetric.COS)]
    + [(TapPoint.SOFTMAX, DistanceMetric.KL)]
)


def check_combo(tap: TapPoint, metric: DistanceMetric) -> None:
    if metric is DistanceMetric.KL and tap is not TapPoint.SOFTMAX:
        raise ConfigError(f"KL distance is only defined at the softmax tap, not {tap.value}")


@dataclass(frozen=True)
class LossWeights:
    alpha_s: float = 1.0
    alpha_t: float = 1.0
    alpha_cr: float = 0.0
    alpha_rd: float = 0.0
    cr_tap: TapPoint = TapPoint.SOFTMAX
    cr_metric: DistanceMetric = DistanceMetric.KL
    rd_tap: TapPoint = TapPoint.SOFTMAX
    rd_metric: DistanceMetric = DistanceMetric.KL

    def __post_init__(self):
        for f in ("cr_tap", "rd_tap"):
            object.__setattr__(self, f, TapPoint(getattr(self, f)))
        for f in ("cr_metric", "rd_metric"):
            object.__setattr__(self, f, DistanceMetric(getattr(self, f)))

    def validate(self) -> "LossWeights":
        if self.alpha_s != 1.0:
            raise ConfigError("alpha_s is fixed at 1.0")
        for name in ("alpha_t", "alpha_cr", "alpha_rd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        check_combo(self.cr_tap, self.cr_metric)
        check_combo(self.rd_tap, self.rd_metric)
        return self

    def to_dict(self) -> dict:
        return {"alpha_s": self.alpha_s, "alpha_t": self.alpha_t, "alpha_cr": self.alpha_cr,
                "alpha_rd": self.alpha_rd, "cr_tap": self.cr_tap.value,
                "cr_metric": self.cr_metric.value, "rd_tap": self.rd_tap.value,
                "rd_metric": self.rd_metric.value}


@dataclass
class LossBreakdown:
    ce_st: float
    ce_mt: float
    cr: float
    rd: float
    total: float
    loss: Tensor  # the differentiable total


# ---------------------------------------------------------------- distances


def _valid_rows(x: Tensor, mask: np.ndarray | None) -> Tensor:
    d = x.shape[-1]
    flat = nx.reshape(x, (-1, d))
    if mask is None:
        return flat
    rows = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    if rows.size == 0:
        raise UsageError("distance over an empty set of positions")
    return nx.take_rows(flat, rows)


def _check_distribution(x: np.ndarray) -> None:
    if np.any(x < 0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-6):
        raise UsageError("KL distance needs probability-vector rows")


def distance(metric: DistanceMetric, a: Tensor, b: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean per-position distance between ``a`` and ``b`` over the last axis.

    ``mask`` (shape ``a.shape[:-1]``) restricts the mean to valid positions.
    Gradients flow into both arguments.
    """
    metric = DistanceMetric(metric)
    if a.shape != b.shape:
        raise UsageError(f"distance shape mismatch: {a.shape} vs {b.shape}")
    x, y = _valid_rows(a, mask), _valid_rows(b, mask)
    d = x.shape[-1]
    if metric is DistanceMetric.MSE:
        diff = nx.sub(x, y)
        per_row = nx.mul(nx.sum(nx.mul(diff, diff), axis=-1), 1.0 / d)
    elif metric is DistanceMetric.COS:
        nxx = nx.sum(nx.mul(x, x), axis=-1)
        nyy = nx.sum(nx.mul(y, y), axis=-1)
        if np.any(nxx.values == 0) or np.any(nyy.values == 0):
            raise NumericError("cosine distance of a zero-norm vector")
        cos = nx.div(nx.sum(nx.mul(x, y), axis=-1), nx.mul(nx.sqrt(nxx), nx.sqrt(nyy)))
        per_row = nx.sub(1.0, cos)
    else:
        _check_distribution(x.values)
        _check_distribution(y.values)
        log_ratio = nx.sub(nx.log(nx.clamp_min(x, KL_FLOOR)), nx.log(nx.clamp_min(y, KL_FLOOR)))
        # x.log(x/y) + y.log(y/x) == (x - y).(log x - log y)
        per_row = nx.mul(nx.sum(nx.mul(nx.sub(x, y), log_ratio), axis=-1), 0.5)
    return nx.mean(per_row)


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """[B, T, d] -> [B, d], averaging each sequence over its valid steps."""
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise UsageError("mean-pool over an empty sequence")
    return nx.mul(nx.sum(nx.mul(x, m[..., None]), axis=1), 1.0 / counts)


def tap(bundle: TapBundle, point: TapPoint) -> tuple[Tensor, np.ndarray]:
    point = TapPoint(point)
    if point is TapPoint.ENC:
        return bundle.enc, bundle.enc_mask
    return getattr(bundle, point.value), bundle.dec_mask


# ---------------------------------------------------------------- loss terms


def ce_loss(bundle: TapBundle, target_out: np.ndarray, mask: np.ndarray) -> Tensor:
    return nx.cross_entropy(bundle.logits, target_out, mask)


def _zero() -> Tensor:
    return Tensor(0.0)


def consistency_loss(weights: LossWeights, speech: TapBundle, text: TapBundle) -> Tensor:
    """alpha_cr * D(speech tap, text tap). The encoder tap is mean-pooled per sequence first."""
    check_combo(weights.cr_tap, weights.cr_metric)
    if weights.alpha_cr == 0:
        return _zero()
    if weights.cr_tap is TapPoint.ENC:
        a = masked_mean_pool(speech.enc, speech.enc_mask)
        b = masked_mean_pool(text.enc, text.enc_mask)
        dist = distance(weights.cr_metric, a, b)
    else:
        a, mask = tap(speech, weights.cr_tap)
        b, _ = tap(text, weights.cr_tap)
        dist = distance(weights.cr_metric, a, b, mask)
    return nx.mul(dist, weights.alpha_cr)


def rdrop_loss(weights: LossWeights, first: TapBundle, second: TapBundle) -> Tensor:
    """alpha_rd * D between two dropout passes over the same speech input."""
    check_combo(weights.rd_tap, weights.rd_metric)
    if weights.alpha_rd == 0:
        return _zero()
    a, mask = tap(first, weights.rd_tap)
    b, _ = tap(second, weights.rd_tap)
    return nx.mul(distance(weights.rd_metric, a, b, mask), weights.alpha_rd)


SPEECH_STREAM, SPEECH_STREAM_2, TEXT_STREAM = 1, 2, 3


def total_loss(weights: LossWeights, batch: Batch, model: Model, rng: RngStream,
               dropout_on: bool = True) -> LossBreakdown:
    """Run the forward passes the weights call for and compose the objective.

    The text pass runs only when alpha_t or alpha_cr is positive; a second
    speech pass runs only when alpha_rd is positive and dropout is active, in
    which case the speech cross-entropy is the mean over both passes.
    """
    weights.validate()
    speech = forward_speech(model, batch, rng.child(SPEECH_STREAM), dropout_on)
    ce_st = ce_loss(speech, batch.target_out_ids, batch.target_mask)

    rd = _zero()
    # without dropout the second pass would be a bitwise copy: the term is exactly 0
    if weights.alpha_rd > 0 and dropout_on and model.config.dropout > 0:
        speech2 = forward_speech(model, batch, rng.child(SPEECH_STREAM_2), dropout_on)
        ce2 = ce_loss(speech2, batch.target_out_ids, batch.target_mask)
        ce_st = nx.mul(nx.add(ce_st, ce2), 0.5)
        rd = rdrop_loss(weights, speech, speech2)

    ce_mt = _zero()
    cr = _zero()
    if weights.alpha_t > 0 or weights.alpha_cr > 0:
        text = forward_text(model, batch, rng.child(TEXT_STREAM), dropout_on)
        ce_mt = ce_loss(text, batch.target_out_ids, batch.target_mask)
        cr = consistency_loss(weights, speech, text)

    total = nx.add(nx.add(nx.mul(ce_st, weights.alpha_s), nx.mul(ce_mt, weights.alpha_t)),
                   nx.add(cr, rd))
    return LossBreakdown(ce_st=ce_st.item(), ce_mt=ce_mt.item(), cr=cr.item(), rd=rd.item(),
                         total=total.item(), loss=total)
