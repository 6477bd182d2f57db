import math
from dataclasses import replace

import numpy as np
import pytest

from reghorizon import numerics as nx
from reghorizon.errors import ConfigError, UsageError
from reghorizon.losses import (LEGAL_COMBOS, DistanceMetric, LossWeights, TapPoint,
                               consistency_loss, distance, rdrop_loss, total_loss)
from reghorizon.model import build, forward_speech, forward_text
from reghorizon.numerics import RngStream, Tensor

from conftest import TINY

MSE, COS, KL = DistanceMetric.MSE, DistanceMetric.COS, DistanceMetric.KL


def sym_kl_direct(p_rows, q_rows):
    """Plain-Python symmetric KL: mean over rows of (KL(p||q) + KL(q||p)) / 2."""
    total = 0.0
    for p, q in zip(p_rows, q_rows):
        pq = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        qp = sum(qi * math.log(qi / pi) for pi, qi in zip(p, q))
        total += 0.5 * (pq + qp)
    return total / len(p_rows)


def valid_rows(t, mask):
    return t.values[mask].tolist()


def test_distance_hand_values():
    assert distance(MSE, Tensor([0.0, 0.0]), Tensor([2.0, 2.0])).item() == pytest.approx(4, abs=1e-12)
    kl = distance(KL, Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    assert kl == pytest.approx(0.13730, abs=1e-4)
    assert kl == pytest.approx(sym_kl_direct([[0.5, 0.5]], [[0.25, 0.75]]), abs=1e-15)
    assert distance(COS, Tensor([1.0, -2.0]), Tensor([-1.0, 2.0])).item() == pytest.approx(2, abs=1e-12)
    assert distance(COS, Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == pytest.approx(1, abs=1e-12)


@pytest.mark.parametrize("metric", [MSE, COS, KL])
def test_distance_of_self_is_zero(metric, gen):
    x = nx.softmax_lastdim(Tensor(gen.normal(size=(3, 5))))
    assert distance(metric, x, x).item() == pytest.approx(0.0, abs=1e-12)


def test_distance_mask_drops_positions(gen):
    a, b = gen.normal(size=(2, 3, 4)), gen.normal(size=(2, 3, 4))
    mask = np.array([[True, False, True], [True, True, False]])
    got = distance(MSE, Tensor(a), Tensor(b), mask).item()
    want = np.mean(((a - b) ** 2).mean(-1)[mask])
    assert got == pytest.approx(want, abs=1e-12)


def test_distance_errors(gen):
    with pytest.raises(UsageError):
        distance(MSE, Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(UsageError):
        distance(KL, Tensor([0.3, 0.3]), Tensor([0.5, 0.5]))


def test_kl_only_at_softmax():
    for tap in TapPoint:
        if tap is not TapPoint.SOFTMAX:
            with pytest.raises(ConfigError):
                LossWeights(cr_tap=tap, cr_metric=KL).validate()
    assert len(LEGAL_COMBOS) == 11


def test_alpha_s_is_fixed():
    with pytest.raises(ConfigError):
        LossWeights(alpha_s=0.5).validate()


def test_negative_alpha_rejected():
    with pytest.raises(ConfigError):
        LossWeights(alpha_rd=-1).validate()


@pytest.fixture
def bundles(tiny_model, tiny_batch):
    s = forward_speech(tiny_model, tiny_batch, RngStream(0, 1), True)
    s2 = forward_speech(tiny_model, tiny_batch, RngStream(0, 2), True)
    t = forward_text(tiny_model, tiny_batch, RngStream(0, 3), True)
    return s, s2, t, tiny_batch.target_mask


def test_zero_alpha_gives_zero(bundles):
    s, s2, t, _ = bundles
    w = LossWeights(alpha_cr=0.0, alpha_rd=0.0)
    assert consistency_loss(w, s, t).item() == 0.0
    assert rdrop_loss(w, s, s2).item() == 0.0


@pytest.mark.parametrize("tap,metric", LEGAL_COMBOS)
def test_identical_bundles_give_zero(bundles, tap, metric):
    s = bundles[0]
    w = LossWeights(alpha_cr=1.0, alpha_rd=1.0, cr_tap=tap, cr_metric=metric, rd_tap=tap,
                    rd_metric=metric)
    assert consistency_loss(w, s, s).item() == pytest.approx(0.0, abs=1e-12)
    assert rdrop_loss(w, s, s).item() == pytest.approx(0.0, abs=1e-12)


def test_consistency_kl_matches_direct_summation(bundles):
    s, _, t, mask = bundles
    w = LossWeights(alpha_cr=1.0)
    got = consistency_loss(w, s, t).item()
    want = sym_kl_direct(valid_rows(s.softmax, mask), valid_rows(t.softmax, mask))
    assert got == pytest.approx(want, abs=1e-9)


def test_rdrop_kl_matches_direct_summation(bundles):
    s, s2, _, mask = bundles
    got = rdrop_loss(LossWeights(alpha_rd=1.0), s, s2).item()
    want = sym_kl_direct(valid_rows(s.softmax, mask), valid_rows(s2.softmax, mask))
    assert got == pytest.approx(want, abs=1e-9)
    assert got > 0


def test_rdrop_zero_without_dropout(tiny_batch):
    model = build(replace(TINY, dropout=0.0), RngStream(1, 11))
    for tap, metric in LEGAL_COMBOS:
        w = LossWeights(alpha_rd=5.0, rd_tap=tap, rd_metric=metric)
        assert total_loss(w, tiny_batch, model, RngStream(3)).rd == 0.0


@pytest.mark.parametrize("which", ["alpha_cr", "alpha_rd"])
def test_regularisers_linear_in_alpha(which, tiny_model, tiny_batch):
    term = "cr" if which == "alpha_cr" else "rd"
    vals = {a: getattr(total_loss(LossWeights(**{which: a}), tiny_batch, tiny_model,
                                  RngStream(8)), term)
            for a in (0.5, 1.0, 3.0)}
    assert vals[0.5] == pytest.approx(0.5 * vals[1.0], rel=1e-12)
    assert vals[3.0] == pytest.approx(3.0 * vals[1.0], rel=1e-12)


@pytest.mark.parametrize("tap,metric", LEGAL_COMBOS)
def test_total_decomposes(tap, metric, tiny_model, tiny_batch):
    w = LossWeights(alpha_t=0.6, alpha_cr=1.7, alpha_rd=2.5, cr_tap=tap, cr_metric=metric,
                    rd_tap=tap, rd_metric=metric)
    b = total_loss(w, tiny_batch, tiny_model, RngStream(4))
    assert b.total == pytest.approx(b.ce_st + 0.6 * b.ce_mt + b.cr + b.rd, abs=1e-9)
    assert b.loss.item() == b.total


def test_baseline_weights(tiny_model, tiny_batch):
    b = total_loss(LossWeights(), tiny_batch, tiny_model, RngStream(4))
    assert b.cr == b.rd == 0.0
    assert b.total == pytest.approx(b.ce_st + b.ce_mt, abs=1e-12)
    st_only = total_loss(LossWeights(alpha_t=0.0), tiny_batch, tiny_model, RngStream(4))
    assert st_only.ce_mt == 0.0 and st_only.total == st_only.ce_st
    assert st_only.ce_st == b.ce_st


def test_total_loss_is_seed_deterministic(tiny_model, tiny_batch):
    w = LossWeights(alpha_cr=1.0, alpha_rd=5.0)
    a = total_loss(w, tiny_batch, tiny_model, RngStream(6)).total
    assert a == total_loss(w, tiny_batch, tiny_model, RngStream(6)).total
    assert a != total_loss(w, tiny_batch, tiny_model, RngStream(7)).total
