"""Relation logits, adaptive-threshold loss, and the decision rule."""

import math

import numpy as np
import pytest

from docrel.autodiff import Tensor
from docrel.classifier import (
    ClassifierError,
    ClassifierParams,
    PairLogits,
    atl_loss,
    pair_logits,
    predict,
    probabilities,
    read_predictions,
    write_predictions,
)


def make_params(rng, d, d_node, R, zero=False):
    def mk(shape):
        return Tensor.param(np.zeros(shape) if zero else rng.standard_normal(shape))

    return ClassifierParams(
        W_a=mk((2 * d + d_node, d)),
        b_a=mk(d),
        W_b=mk((d, R + 1)),
        b_b=mk(R + 1),
    )


class TestPairLogits:
    def test_zero_params_yield_bias(self):
        rng = np.random.default_rng(0)
        params = make_params(rng, 3, 4, 2, zero=True)
        params.b_b = Tensor.param(np.array([1.0, -2.0, 0.5]))
        pl = pair_logits(np.ones(3), np.ones(3), np.ones(4), params)
        np.testing.assert_allclose(pl.logits.data, [1.0, -2.0, 0.5])

    def test_bias_shift_is_exact(self):
        rng = np.random.default_rng(1)
        params = make_params(rng, 3, 4, 2)
        pl1 = pair_logits(np.ones(3), np.ones(3), np.ones(4), params)
        params.b_b.data = params.b_b.data.copy()
        params.b_b.data[1] += 3.5
        pl2 = pair_logits(np.ones(3), np.ones(3), np.ones(4), params)
        delta = pl2.logits.data - pl1.logits.data
        np.testing.assert_allclose(delta, [0.0, 3.5, 0.0], atol=1e-12)

    def test_random_tiny_instance_vs_loop_oracle(self):
        rng = np.random.default_rng(2)
        d, dn, R = 4, 6, 3
        params = make_params(rng, d, dn, R)
        e_h, e_t = rng.standard_normal(d), rng.standard_normal(d)
        pf = rng.standard_normal(dn)
        pl = pair_logits(e_h, e_t, pf, params)

        r_vec = np.concatenate([e_h, e_t, pf])
        hidden = np.zeros(d)
        for j in range(d):
            acc = params.b_a.data[j]
            for i in range(2 * d + dn):
                acc += params.W_a.data[i, j] * r_vec[i]
            hidden[j] = math.tanh(acc)
        expected = np.zeros(R + 1)
        for r in range(R + 1):
            acc = params.b_b.data[r]
            for j in range(d):
                acc += params.W_b.data[j, r] * hidden[j]
            expected[r] = acc
        np.testing.assert_allclose(pl.logits.data, expected, atol=1e-12)

    def test_probabilities_are_logistic(self):
        pl = PairLogits(Tensor.constant(np.array([0.0, 2.0, -2.0])), (0, 1))
        np.testing.assert_allclose(
            probabilities(pl), 1 / (1 + np.exp(-np.array([0.0, 2.0, -2.0])))
        )


class TestAtlLoss:
    def test_no_positives_equal_logits_is_log4(self):
        loss = atl_loss(Tensor.constant(np.zeros(4)), set())
        assert abs(float(loss.data) - math.log(4.0)) < 1e-9

    def test_wide_margin_case_frozen_value(self):
        # one positive at +10, TH at 0, one negative at -10
        logits = Tensor.constant(np.array([10.0, -10.0, 0.0]))
        loss = atl_loss(logits, {0})
        expected = 2.0 * math.log1p(math.exp(-10.0))
        assert abs(float(loss.data) - expected) < 1e-12
        assert abs(float(loss.data) - 9.08e-5) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            R = int(rng.integers(1, 6))
            logits = rng.standard_normal(R + 1) * 5
            gold = set(int(r) for r in rng.choice(R, size=rng.integers(0, R + 1), replace=False))
            base = float(atl_loss(Tensor.constant(logits), gold).data)
            shifted = float(atl_loss(Tensor.constant(logits + 13.7), gold).data)
            assert abs(base - shifted) < 1e-9

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            logits = rng.standard_normal(5) * 3
            gold = set(int(r) for r in rng.choice(4, size=rng.integers(0, 3), replace=False))
            assert float(atl_loss(Tensor.constant(logits), gold).data) >= 0.0

    def test_threshold_in_gold_rejected(self):
        with pytest.raises(ClassifierError):
            atl_loss(Tensor.constant(np.zeros(4)), {3})

    def test_out_of_range_gold_rejected(self):
        with pytest.raises(ClassifierError):
            atl_loss(Tensor.constant(np.zeros(4)), {7})

    def test_gradient_matches_fd_and_sums_to_zero(self):
        rng = np.random.default_rng(5)
        for gold in [set(), {0}, {0, 2}, {0, 1, 2}]:
            logits0 = rng.standard_normal(4) * 2
            t = Tensor.param(logits0.copy())
            atl_loss(t, gold).backward()
            assert abs(t.grad.sum()) < 1e-12  # shift invariance in gradient form
            step = 1e-6
            for i in range(4):
                lp = logits0.copy()
                lp[i] += step
                lm = logits0.copy()
                lm[i] -= step
                fd = (
                    float(atl_loss(Tensor.constant(lp), gold).data)
                    - float(atl_loss(Tensor.constant(lm), gold).data)
                ) / (2 * step)
                rel = abs(t.grad[i] - fd) / max(abs(t.grad[i]), abs(fd), 1e-6)
                assert rel <= 1e-6, (gold, i, rel)

    def test_blockwise_gradient_sums(self):
        rng = np.random.default_rng(6)
        # positives empty: only the negative block carries gradient
        t = Tensor.param(rng.standard_normal(4))
        atl_loss(t, set()).backward()
        assert abs(t.grad.sum()) < 1e-12
        # negatives empty: only the positive block carries gradient
        t2 = Tensor.param(rng.standard_normal(4))
        atl_loss(t2, {0, 1, 2}).backward()
        assert abs(t2.grad.sum()) < 1e-12


class TestPredict:
    def test_above_threshold_selected(self):
        pl = PairLogits(Tensor.constant(np.array([1.0, 0.2, 0.5])), (0, 1))
        assert predict(pl) == {0}

    def test_all_below_threshold_empty(self):
        pl = PairLogits(Tensor.constant(np.array([-1.0, -0.2, 0.5])), (0, 1))
        assert predict(pl) == set()

    def test_tie_is_negative(self):
        pl = PairLogits(Tensor.constant(np.array([0.5, 0.1, 0.5])), (0, 1))
        assert predict(pl) == set()

    def test_shift_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            logits = rng.standard_normal(6)
            a = predict(PairLogits(Tensor.constant(logits), (0, 1)))
            b = predict(PairLogits(Tensor.constant(logits + 4.2), (0, 1)))
            assert a == b


class TestPredictionDump:
    def test_round_trip(self, tmp_path):
        records = [("doc-a", 0, 1, 3, 0.875), ("doc-b", 2, 0, 1, 0.25)]
        path = tmp_path / "preds.tsv"
        write_predictions(path, records)
        assert read_predictions(path) == records

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "preds.tsv"
        path.write_text("nope\n")
        with pytest.raises(ClassifierError):
            read_predictions(path)
