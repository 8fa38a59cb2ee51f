"""Closed-form top-layer traces against the finite-difference Hessian oracle."""

import numpy as np
import pytest

from trhreg import tape
from trhreg.attacks import AttackConfig
from trhreg.hessian_oracle import (exact_trace, frozen_objective_fns,
                                   top_layer_indices)
from trhreg.losses import RobustLossKind, softmax
from trhreg.network import (DenseLayer, MlpNetwork, flatten_weights, forward,
                            init_mlp, lift)
from trhreg.numerics import Rng
from trhreg.trh import (TradesFullTerms, TrHConfig, training_objective,
                        analytic_trh_rows, objective_nodes, robust_loss_rows,
                        trh_alp, trh_at, trh_mart, trh_trades,
                        trh_trades_full)
from trhreg.verify import sample_smooth_instance


def zero_top_net(k=2, d=2):
    net = MlpNetwork([DenseLayer(np.zeros((d, k)))])
    return net


class TestTrhAt:
    def test_zero_top_layer_closed_value(self):
        # logits 0 for K=2: 1^T h = 0.5; feature norm 2 -> trace 1.0
        net = zero_top_net()
        tr = forward(net, np.array([1.0, 1.0]))
        assert trh_at(tr) == pytest.approx(1.0, abs=1e-15)

    def test_zero_feature_zero_trace(self):
        net = zero_top_net()
        tr = forward(net, np.zeros(2))
        assert trh_at(tr) == 0.0

    def test_oracle_match_random_net(self):
        net, x, x_adv, y = sample_smooth_instance(101)
        kind = RobustLossKind("at")
        _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind)
        oracle = exact_trace(grad_fn, flatten_weights(net), top_layer_indices(net))
        analytic = trh_at(forward(net, x_adv[0]))
        assert analytic == pytest.approx(oracle, rel=1e-5)


class TestTrhTrades:
    def test_zero_penalty_reduces_to_clean_ce(self):
        net, x, x_adv, _ = sample_smooth_instance(102)
        tr, tr_adv = forward(net, x[0]), forward(net, x_adv[0])
        clean_only = trh_trades(tr, tr_adv, 0.0)
        d = softmax(tr.logits)
        expected = float(np.dot(tr.features, tr.features)) * float(np.sum(d * (1 - d)))
        assert clean_only == pytest.approx(expected, rel=1e-12)

    def test_uniform_ten_class_value(self):
        # unit-norm features, zero logits at K=10: 0.9 + 6 * 0.9 = 6.3
        net = zero_top_net(k=10, d=1)
        tr = forward(net, np.array([1.0]))
        assert trh_trades(tr, tr, 6.0) == pytest.approx(6.3, abs=1e-12)

    def test_oracle_match_frozen_clean(self):
        net, x, x_adv, y = sample_smooth_instance(103)
        kind = RobustLossKind("trades", 6.0)
        _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind,
                                          stop_grad_clean=True)
        oracle = exact_trace(grad_fn, flatten_weights(net), top_layer_indices(net))
        analytic = trh_trades(forward(net, x[0]), forward(net, x_adv[0]), 6.0)
        assert analytic == pytest.approx(oracle, rel=1e-5)

    def test_rejects_negative_penalty(self):
        net = zero_top_net()
        tr = forward(net, np.ones(2))
        with pytest.raises(ValueError):
            trh_trades(tr, tr, -1.0)


class TestTrhTradesFull:
    def test_coincident_inputs_reduce_to_clean_term(self):
        # at x' == x the KL part of the objective is identically zero in
        # the weights, so its trace contribution must vanish exactly
        net, x, _, y = sample_smooth_instance(104)
        tr = forward(net, x[0])
        value, terms = trh_trades_full(tr, tr, 4.0)
        clean = trh_trades(tr, tr, 0.0)
        assert value == pytest.approx(clean, rel=1e-12)
        # oracle agreement at coincident inputs
        kind = RobustLossKind("trades", 4.0)
        _, grad_fn = frozen_objective_fns(net, x, x, y, kind,
                                          stop_grad_clean=False)
        oracle = exact_trace(grad_fn, flatten_weights(net), top_layer_indices(net))
        assert value == pytest.approx(oracle, rel=1e-5, abs=1e-7)

    def test_zero_penalty_matches_stop_grad_version(self):
        net, x, x_adv, _ = sample_smooth_instance(105)
        tr, tr_adv = forward(net, x[0]), forward(net, x_adv[0])
        full, _ = trh_trades_full(tr, tr_adv, 0.0)
        assert full == pytest.approx(trh_trades(tr, tr_adv, 0.0), rel=1e-12)

    def test_oracle_match_unfrozen(self):
        for seed in (106, 107, 108):
            net, x, x_adv, y = sample_smooth_instance(seed)
            kind = RobustLossKind("trades", 6.0)
            _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind,
                                              stop_grad_clean=False)
            oracle = exact_trace(grad_fn, flatten_weights(net),
                                 top_layer_indices(net))
            value, _ = trh_trades_full(forward(net, x[0]),
                                       forward(net, x_adv[0]), 6.0)
            assert value == pytest.approx(oracle, rel=1e-5)

    def test_column_products_collapse_to_h(self):
        # omega_k = Phi_col_k . Psi_col_k and its primed variant both equal
        # h_k identically; the reduced expressions in the tape objective
        # rely on this collapse
        net, x, x_adv, _ = sample_smooth_instance(109)
        tr, tr_adv = forward(net, x[0]), forward(net, x_adv[0])
        _, terms = trh_trades_full(tr, tr_adv, 2.0)
        d = softmax(tr.logits)
        h = d * (1 - d)
        assert np.allclose(terms.omega, h, atol=1e-12)
        assert np.allclose(terms.omega_prime, h, atol=1e-12)
        assert isinstance(terms, TradesFullTerms)
        assert terms.psi.shape == terms.psi_prime.shape


class TestTrhAlp:
    def test_zero_penalty_equals_adversarial_ce_trace(self):
        net, x, x_adv, _ = sample_smooth_instance(110)
        tr, tr_adv = forward(net, x[0]), forward(net, x_adv[0])
        assert trh_alp(tr, tr_adv, 0.0) == pytest.approx(trh_at(tr_adv), rel=1e-12)

    def test_symmetric_two_class_point_oracle(self):
        # s == s' at a symmetric point: the pairing trace reduces to the
        # pure squared-Jacobian part and must still match the oracle
        net = MlpNetwork([DenseLayer(np.array([[1.0, 1.0], [0.5, 0.5]]))])
        x = np.array([[0.4, -0.2]])
        y = np.array([0])
        kind = RobustLossKind("alp", 0.7)
        _, grad_fn = frozen_objective_fns(net, x, x, y, kind)
        oracle = exact_trace(grad_fn, flatten_weights(net), top_layer_indices(net))
        tr = forward(net, x[0])
        assert trh_alp(tr, tr, 0.7) == pytest.approx(oracle, rel=1e-5)

    def test_oracle_match_random_net(self):
        for seed in (111, 112, 113):
            net, x, x_adv, y = sample_smooth_instance(seed)
            kind = RobustLossKind("alp", 0.5)
            _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind)
            oracle = exact_trace(grad_fn, flatten_weights(net),
                                 top_layer_indices(net))
            analytic = trh_alp(forward(net, x[0]), forward(net, x_adv[0]), 0.5)
            assert analytic == pytest.approx(oracle, rel=1e-5)


class TestTrhMart:
    def test_saturated_margin_tends_to_clean_ce_trace(self):
        # drive the runner-up adversarial probability toward zero: the
        # margin contribution vanishes and the clean-CE term remains
        net = MlpNetwork([DenseLayer(np.array([[8.0, -8.0], [0.0, 0.0]]))])
        x = np.array([2.0, 0.3])
        tr = forward(net, x)
        val = trh_mart(tr, tr, 0, 0.0)
        clean = trh_trades(tr, tr, 0.0)
        assert val == pytest.approx(clean, rel=1e-4)

    def test_binary_symmetric_oracle(self):
        net = MlpNetwork([DenseLayer(np.array([[0.3, -0.3], [-0.1, 0.1]]))])
        x = np.array([[0.9, 0.4]])
        y = np.array([0])
        kind = RobustLossKind("mart", 5.0)
        _, grad_fn = frozen_objective_fns(net, x, x, y, kind)
        oracle = exact_trace(grad_fn, flatten_weights(net), top_layer_indices(net))
        analytic = trh_mart(forward(net, x[0]), forward(net, x[0]), 0, 5.0)
        assert analytic == pytest.approx(oracle, rel=1e-5)

    def test_oracle_match_three_class(self):
        hits = 0
        seed = 114
        while hits < 3:
            net, x, x_adv, y = sample_smooth_instance(seed)
            seed += 1
            if net.num_classes < 3:
                continue
            hits += 1
            kind = RobustLossKind("mart", 5.0)
            _, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind)
            oracle = exact_trace(grad_fn, flatten_weights(net),
                                 top_layer_indices(net))
            analytic = trh_mart(forward(net, x[0]), forward(net, x_adv[0]),
                                int(y[0]), 5.0)
            assert analytic == pytest.approx(oracle, rel=1e-5)


class TestObjectiveNodes:
    def test_lam_zero_gamma_zero_is_bare_robust_loss(self):
        net, x, x_adv, y = sample_smooth_instance(120)
        for kind in (RobustLossKind("at"), RobustLossKind("trades", 6.0),
                     RobustLossKind("alp", 0.5), RobustLossKind("mart", 5.0)):
            node = objective_nodes(lift(net), x, x_adv, y, kind, 0.0, 0.0)
            bare = float(np.mean(robust_loss_rows(net, x, x_adv, y, kind)))
            assert float(node.value) == pytest.approx(bare, rel=1e-14)

    def test_batched_trh_rows_match_per_example_formulas(self):
        rng = Rng(55)
        net = init_mlp([3, 6, 4], rng.child("i"))
        X = rng.child("x").normal(size=(8, 3))
        X_adv = X + 0.05 * rng.child("e").normal(size=(8, 3))
        y = rng.child("y").integers(0, 4, size=8)
        for kind in (RobustLossKind("at"), RobustLossKind("trades", 6.0),
                     RobustLossKind("alp", 0.5), RobustLossKind("mart", 5.0)):
            for sgc in ((True, False) if kind.variant == "trades" else (True,)):
                lam = 0.37
                node = objective_nodes(lift(net), X, X_adv, y, kind, lam, 0.0,
                                       stop_grad_clean=sgc)
                bare = robust_loss_rows(net, X, X_adv, y, kind)
                trh_rows = analytic_trh_rows(net, X, X_adv, y, kind,
                                             stop_grad_clean=sgc)
                expected = float(np.mean(bare + lam * trh_rows))
                assert float(node.value) == pytest.approx(expected, rel=1e-12), kind


class TestTrainingObjective:
    def test_zero_weights_null_attack_gives_log_k(self):
        net = init_mlp([3, 5, 4], Rng(0).child("i"))
        for layer in net.layers:
            layer.weights[:] = 0.0
        ds_x = Rng(0).child("x").normal(size=(6, 3))
        y = Rng(0).child("y").integers(0, 4, size=6)
        res = training_objective(
            net, (ds_x, y), RobustLossKind("at"), TrHConfig(lam=0.0),
            gamma=0.5, attack_cfg=AttackConfig(delta=0.0, steps=1),
            rng=Rng(1).child("a"))
        assert res.value == pytest.approx(np.log(4), rel=1e-12)

    def test_gradients_match_finite_differences(self):
        from trhreg.numerics import finite_diff_gradient
        net, x, x_adv, y = sample_smooth_instance(121)
        kind = RobustLossKind("trades", 6.0)
        value_fn, grad_fn = frozen_objective_fns(net, x, x_adv, y, kind,
                                                 lam=0.3, gamma=0.01)
        w0 = flatten_weights(net)
        fd = finite_diff_gradient(value_fn, w0)
        an = grad_fn(w0)
        assert np.linalg.norm(an - fd) / np.linalg.norm(fd) <= 1e-6

    def test_nonempty_batch_required(self):
        net = init_mlp([2, 3, 2], Rng(0).child("i"))
        with pytest.raises(ValueError):
            training_objective(net, (np.zeros((0, 2)), np.zeros(0, dtype=int)),
                                 RobustLossKind("at"), TrHConfig(),
                                 0.0, AttackConfig(delta=0.1, steps=1),
                                 Rng(0).child("a"))
