"""Objective-term tests: hand-evaluated values, role gating, and gradients."""

import numpy as np
import numpy.testing as npt
import pytest

from longipool import autodiff as ad
from longipool import layers, losses


def t(values):
    return ad.Tensor(np.asarray(values, dtype=np.float32))


def prob(v):
    return t([v])


def seq(*values):
    return [prob(v) for v in values]


class TestWeightedBce:
    def test_half_probability_positive_label(self):
        e = losses.weighted_bce(seq(0.5), [1], 1.0)
        npt.assert_allclose(e.item(), np.log(0.5), rtol=1e-6)

    def test_w_pos_scales_positive_terms(self):
        e = losses.weighted_bce(seq(0.5), [1], 2.0)
        npt.assert_allclose(e.item(), 2.0 * np.log(0.5), rtol=1e-6)

    def test_perfect_predictions_near_zero(self):
        e = losses.weighted_bce(seq(1.0, 0.0), [1, 0], 1.0)
        assert abs(e.item()) < 1e-5

    def test_doubling_w_pos_touches_only_positive_terms(self):
        preds, labels = seq(0.7, 0.4, 0.2), [1, 0, 1]
        e1 = losses.weighted_bce(preds, labels, 1.0).item()
        e2 = losses.weighted_bce(preds, labels, 2.0).item()
        pos_part = np.log(0.7) + np.log(0.2)
        neg_part = np.log(1 - 0.4)
        npt.assert_allclose(e1, pos_part + neg_part, rtol=1e-5)
        npt.assert_allclose(e2, 2 * pos_part + neg_part, rtol=1e-5)

    def test_out_of_range_prediction_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            losses.weighted_bce(seq(1.5), [1], 1.0)
        with pytest.raises(ValueError, match="outside"):
            losses.weighted_bce([t([float("nan")])], [1], 1.0)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError, match="label"):
            losses.weighted_bce(seq(0.5), [2], 1.0)

    def test_gradient_pushes_probability_toward_label(self):
        tape = ad.Tape()
        p = prob(0.3)
        tape.watch(p)
        e = losses.weighted_bce([p], [1], 1.0, tape)
        neg_e = ad.scale(e, -1.0, tape)
        g = ad.backward(tape, neg_e)[p]
        assert g[0] < 0.0  # raising p lowers -E when y=1
        tape = ad.Tape()
        p = prob(0.3)
        tape.watch(p)
        e = losses.weighted_bce([p], [0], 1.0, tape)
        g = ad.backward(tape, ad.scale(e, -1.0, tape))[p]
        assert g[0] > 0.0


class TestConsistencyLoss:
    def test_monotone_sequence_contributes_zero(self):
        out = losses.consistency_loss([seq(0.2, 0.5, 0.9)], ["positive"])
        assert out.item() == 0.0

    def test_single_dip_hand_value(self):
        out = losses.consistency_loss([seq(0.5, 0.3, 0.6)], ["positive"])
        npt.assert_allclose(out.item(), 0.2, atol=1e-6)

    def test_controls_are_ignored(self):
        out = losses.consistency_loss([seq(0.9, 0.1)], ["control"])
        assert out.item() == 0.0

    def test_consistency_only_subjects_count(self):
        out = losses.consistency_loss([seq(0.9, 0.1)], ["consistency_only"])
        npt.assert_allclose(out.item(), 0.8, atol=1e-6)

    def test_single_visit_contributes_zero(self):
        out = losses.consistency_loss([seq(0.9)], ["positive"])
        assert out.item() == 0.0

    def test_nonnegative_and_zero_iff_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            vals = rng.uniform(0.01, 0.99, size=rng.integers(1, 6))
            out = losses.consistency_loss([seq(*vals)], ["positive"]).item()
            assert out >= 0.0
            assert (out == 0.0) == bool(np.all(np.diff(vals) >= 0))

    def test_hinge_gradient_bounded_by_one(self):
        tape = ad.Tape()
        preds = seq(0.8, 0.2, 0.5)
        for p in preds:
            tape.watch(p)
        out = losses.consistency_loss([preds], ["positive"], tape)
        store = ad.backward(tape, out)
        for p in preds:
            assert np.abs(store[p]).max() <= 1.0 + 1e-6


class TestL2Penalty:
    def test_zero_weights_zero_penalty(self):
        params = layers.init_params("cnn_rnn_lp", seed=0, input_extent=8)
        for _, w in params.l2_parameters():
            w.array[...] = 0.0
        assert losses.l2_penalty(params).item() == 0.0

    def test_single_matrix_hand_value(self):
        params = layers.init_params("cnn", seed=1, input_extent=8)
        for _, w in params.l2_parameters():
            w.array[...] = 0.0
        params.head.weight.array[...] = 0.0
        params.head.weight.array[0, :2] = [3.0, 4.0]
        npt.assert_allclose(losses.l2_penalty(params).item(), 25.0, rtol=1e-6)

    def test_conv_kernels_excluded(self):
        params = layers.init_params("cnn_rnn_lp", seed=2, input_extent=8)
        before = losses.l2_penalty(params).item()
        for block in params.encoder.blocks:
            for stack in block:
                stack.kernels.array[...] *= 2.0
        assert losses.l2_penalty(params).item() == before

    def test_biases_excluded(self):
        params = layers.init_params("cnn_rnn_lp", seed=3, input_extent=8)
        before = losses.l2_penalty(params).item()
        params.encoder.fc1_bias.array[...] = 7.0
        params.head.bias.array[...] = -3.0
        assert losses.l2_penalty(params).item() == before

    def test_scope_is_gru_fusion_fc_head(self):
        params = layers.init_params("cnn_rnn_lp", seed=4, input_extent=8)
        names = [n for n, _ in params.l2_parameters()]
        assert set(names) == {
            "encoder.fc1.weight", "encoder.fc2.weight", "fusion.weight",
            "gru.w_update", "gru.w_reset", "gru.w_cand",
            "gru.u_update", "gru.u_reset", "gru.u_cand", "head.weight",
        }


class TestTotalObjective:
    def test_hand_evaluated_combination(self):
        weights = losses.LossWeights(lambda_cons=2.0, lambda_reg=0.02)
        out = losses.total_objective(t(np.float32(-0.6931)), t(np.float32(0.2)),
                                     t(np.float32(25.0)), weights)
        npt.assert_allclose(out.item(), 0.6931 + 0.4 + 0.5, rtol=1e-5)

    def test_zero_lambda_cons_removes_consistency_path(self):
        weights = losses.LossWeights(lambda_cons=0.0, lambda_reg=0.02)
        out = losses.total_objective(t(np.float32(-0.6931)), t(np.float32(123.0)),
                                     t(np.float32(25.0)), weights)
        npt.assert_allclose(out.item(), 0.6931 + 0.5, rtol=1e-5)

    def test_all_zero_model_on_balanced_labels(self):
        # p_t = 0.5 everywhere: -E per subject is m*log(2) with w_pos=1
        preds, labels = seq(0.5, 0.5, 0.5), [1, 0, 1]
        e = losses.weighted_bce(preds, labels, 1.0)
        npt.assert_allclose(-e.item(), 3 * np.log(2.0), rtol=1e-5)

    def test_gradient_is_sum_of_component_gradients(self):
        tape = ad.Tape()
        preds = seq(0.6, 0.4)
        for p in preds:
            tape.watch(p)
        weights = losses.LossWeights(lambda_cons=2.0, lambda_reg=0.02, w_pos=1.0)
        e = losses.weighted_bce(preds, [1, 1], weights.w_pos, tape)
        cons = losses.consistency_loss([preds], ["positive"], tape)
        penalty = t(np.zeros(()))
        total = losses.total_objective(e, cons, penalty, weights, tape)
        g_total = [ad.backward(tape, total)[p][0] for p in preds]

        tape_e = ad.Tape()
        preds_e = seq(0.6, 0.4)
        for p in preds_e:
            tape_e.watch(p)
        e_only = ad.scale(losses.weighted_bce(preds_e, [1, 1], 1.0, tape_e), -1.0, tape_e)
        g_e = [ad.backward(tape_e, e_only)[p][0] for p in preds_e]

        tape_c = ad.Tape()
        preds_c = seq(0.6, 0.4)
        for p in preds_c:
            tape_c.watch(p)
        c_only = ad.scale(losses.consistency_loss([preds_c], ["positive"], tape_c),
                          2.0, tape_c)
        g_c = [ad.backward(tape_c, c_only)[p][0] for p in preds_c]

        npt.assert_allclose(g_total, np.asarray(g_e) + np.asarray(g_c), atol=1e-6)


class TestBatchObjective:
    def _params(self):
        return layers.init_params("cnn_rnn_lp", seed=5, input_extent=8)

    def test_entropy_averages_over_classified_subjects(self):
        params = self._params()
        weights = losses.LossWeights(w_pos=1.0)
        preds = [seq(0.5), seq(0.5, 0.5)]
        labels = [[1], [0, 0]]
        roles = ["positive", "control"]
        _, stats = losses.batch_objective(preds, labels, roles, params, weights)
        want = -(np.log(0.5) + 2 * np.log(0.5)) / 2
        npt.assert_allclose(stats["neg_entropy"], want, rtol=1e-5)

    def test_consistency_only_changes_cons_but_not_entropy(self):
        # unit-level check for the consistency-only cohort contract
        params = self._params()
        weights = losses.LossWeights(w_pos=1.0)
        preds = [seq(0.4, 0.6), seq(0.7, 0.2)]
        labels = [[1, 1], [0, 0]]
        roles = ["positive", "control"]
        _, base = losses.batch_objective(preds, labels, roles, params, weights)

        preds2 = preds + [seq(0.9, 0.1)]
        labels2 = labels + [[1, 1]]
        roles2 = roles + ["consistency_only"]
        _, extended = losses.batch_objective(preds2, labels2, roles2, params, weights)

        assert extended["neg_entropy"] == base["neg_entropy"]  # bitwise
        assert extended["consistency"] != base["consistency"]

    def test_controls_only_batch_has_zero_consistency(self):
        params = self._params()
        preds = [seq(0.9, 0.1), seq(0.8, 0.3)]
        labels = [[0, 0], [0, 0]]
        roles = ["control", "control"]
        _, stats = losses.batch_objective(preds, labels, roles, params,
                                          losses.LossWeights())
        assert stats["consistency"] == 0.0


class TestAutoWPos:
    def test_balances_visit_counts(self):
        labels = [[1, 1], [0, 0, 0, 0]]
        roles = ["positive", "control"]
        assert losses.auto_w_pos(labels, roles) == 2.0

    def test_consistency_only_excluded(self):
        labels = [[1, 1], [0, 0], [1, 1, 1, 1]]
        roles = ["positive", "control", "consistency_only"]
        assert losses.auto_w_pos(labels, roles) == 1.0

    def test_single_class_falls_back_to_one(self):
        assert losses.auto_w_pos([[1, 1]], ["positive"]) == 1.0
