import math

import numpy as np
import pytest

from drae.errors import InvalidParameter, ShapeMismatch
from drae.numerics import make_rng, softmax
from drae.rsho import rank_candidates
from drae.system import DraeSystem, SystemConfig, margin_ranking_loss
from drae.trainer import (
    LossBreakdown,
    TrainConfig,
    adapt_weights,
    compute_losses,
    grad_check,
    sgd_step,
)


def tiny_system(**overrides):
    kwargs = dict(input_dim=4, classes=3, expert_hidden=5, num_experts=3,
                  active_m=2, embed_dim=4, rank=2, seed=9)
    kwargs.update(overrides)
    return DraeSystem(SystemConfig(**kwargs))


def randomized(system, seed=0):
    rng = make_rng(seed)
    system.gating.weights = rng.normal(0, 0.5, system.gating.weights.shape)
    system.gating.biases = rng.normal(0, 0.5, system.gating.biases.shape)
    if system.fusion is not None:
        system.fusion.bl = rng.normal(0, 0.3, system.fusion.bl.shape)
    return system


class TestLossBreakdown:
    def test_all_ones_totals_six(self):
        b = LossBreakdown.build(1, 1, 1, 1, 1, 1, alpha_t=1.0, gamma_t=1.0)
        assert b.total == pytest.approx(6.0, abs=1e-12)

    def test_recomposes_exactly(self):
        rng = make_rng(1)
        for _ in range(50):
            vals = rng.normal(0, 2, 6)
            a, g = rng.uniform(0.1, 10, 2)
            b = LossBreakdown.build(*vals, alpha_t=a, gamma_t=g)
            expected = (b.l_reflex + b.l_schema + a * (b.l_moe + b.l_prag)
                        + g * (b.l_hyper + b.l_dpmm))
            assert b.total == pytest.approx(expected, abs=1e-12)

    def test_rejects_nonpositive_weights(self):
        with pytest.raises(InvalidParameter):
            LossBreakdown.build(0, 0, 0, 0, 0, 0, alpha_t=0.0, gamma_t=1.0)


class TestComputeLosses:
    def test_perfect_predictions_zero_moe_loss(self):
        system = tiny_system()
        # saturate every expert toward class 1 regardless of input
        for e in system.experts:
            e.w1[:] = 0.0
            e.b1[:] = 1.0
            e.w2[:] = 0.0
            e.b2[:] = np.array([-200.0, 200.0, -200.0])
        rng = make_rng(2)
        batch = [(rng.normal(0, 1, 4), 1) for _ in range(5)]
        breakdown = compute_losses(system, batch)
        assert breakdown.l_moe == 0.0
        assert breakdown.l_prag == 0.0

    def test_empty_batch_rejected(self):
        with pytest.raises(InvalidParameter):
            compute_losses(tiny_system(), [])

    def test_hand_evaluated_total(self):
        # dim-1 everything, all parameters hand-set; every component is
        # recomputed here with explicit scalar formulas
        cfg = SystemConfig(input_dim=1, classes=2, expert_hidden=1,
                           num_experts=1, active_m=1, embed_dim=1, rank=1,
                           dpmm_enabled=True, prag_enabled=True, seed=0,
                           base_var=4.0, obs_var=1.0)
        system = DraeSystem(cfg)
        e = system.experts[0]
        e.w1[:] = np.array([[2.0]])
        e.b1[:] = np.array([0.5])
        e.w2[:] = np.array([[1.5, -0.5]])
        e.b2[:] = np.array([0.25, -0.25])
        system.gating.weights[:] = np.array([[0.3, -0.2]])
        system.gating.biases[:] = np.array([0.1])
        system.fusion.w0[:] = np.array([[1.2]])
        system.fusion.bl[:] = np.array([[0.7]])
        system.fusion.al[:] = np.array([[0.6]])
        system.fusion.ud[:] = np.array([[-0.9]])
        system.encoder[:] = np.array([[1.0]])
        system.corpus = None  # no documents: d_agg = 0
        x, label = 0.8, 0

        # plain path: single expert, gate renormalizes to 1
        h1 = max(2.0 * x + 0.5, 0.0)
        y_moe = softmax(np.array([1.5 * h1 + 0.25, -0.5 * h1 - 0.25]))
        l_moe = -math.log(y_moe[label])
        # retrieval path: zero context, sigmoid gate 0.5
        h_rag = 1.2 * x + 0.7 * 0.6 * x * 0.5
        h1r = max(2.0 * h_rag + 0.5, 0.0)
        y_prag = softmax(np.array([1.5 * h1r + 0.25, -0.5 * h1r - 0.25]))
        l_prag = -math.log(y_prag[label])
        # empty mixture: base predictive N(x; 0, base + obs)
        var = 4.0 + 1.0
        l_dpmm = -(-0.5 * (math.log(2 * math.pi * var) + x * x / var))
        l_reflex = system.plant.episode(cfg.kp, cfg.ki, cfg.kd)
        l_schema = system.probe_schema()
        conf, _ = rank_candidates(system.memory)
        l_hyper = margin_ranking_loss(conf, system.returns)
        expected_total = (l_reflex + l_schema + 1.0 * (l_moe + l_prag)
                          + 1.0 * (l_hyper + l_dpmm))

        breakdown = compute_losses(system, [(np.array([x]), label)])
        assert breakdown.l_moe == pytest.approx(l_moe, abs=1e-10)
        assert breakdown.l_prag == pytest.approx(l_prag, abs=1e-10)
        assert breakdown.l_dpmm == pytest.approx(l_dpmm, abs=1e-10)
        assert breakdown.total == pytest.approx(expected_total, abs=1e-10)


class TestAdaptWeights:
    def _breakdown(self, pred, mem):
        return LossBreakdown.build(0.1, 0.0, pred / 2, pred / 2, mem / 2,
                                   mem / 2, alpha_t=1.0, gamma_t=1.0)

    def test_no_drive_no_change(self):
        ref = self._breakdown(1.0, 0.5)
        assert adapt_weights((1.0, 1.0), ref, ref, 0.1) == (1.0, 1.0)

    def test_doubled_loss_multiplies_by_exp_step(self):
        ref = self._breakdown(1.0, 1.0)
        val = self._breakdown(2.0, 1.0)
        alpha, gamma = adapt_weights((1.0, 1.0), val, ref, 0.1)
        assert alpha == pytest.approx(math.exp(0.1), abs=1e-12)
        assert gamma == pytest.approx(1.0, abs=1e-12)

    def test_bounds_hold_under_random_updates(self):
        rng = make_rng(3)
        alpha, gamma = 1.0, 1.0
        for _ in range(10_000):
            val = self._breakdown(float(rng.uniform(0, 5)),
                                  float(rng.uniform(0, 5)))
            ref = self._breakdown(float(rng.uniform(0.1, 5)),
                                  float(rng.uniform(0.1, 5)))
            alpha, gamma = adapt_weights((alpha, gamma), val, ref,
                                         float(rng.uniform(0.01, 1.0)))
            assert 0.1 <= alpha <= 10.0
            assert 0.1 <= gamma <= 10.0

    def test_rejects_bad_step(self):
        ref = self._breakdown(1.0, 1.0)
        with pytest.raises(InvalidParameter):
            adapt_weights((1.0, 1.0), ref, ref, 0.0)


class TestSgdStep:
    def test_zero_grads_identity(self):
        params = {"w": np.array([1.0, 2.0])}
        out = sgd_step(params, {"w": np.zeros(2)}, 0.1)
        assert np.array_equal(out["w"], params["w"])

    def test_scalar_update(self):
        out = sgd_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, 0.1)
        assert out["p"][0] == pytest.approx(0.8, abs=1e-15)

    def test_quadratic_contraction_matches_closed_form(self):
        # loss ||p - p*||^2 has gradient 2 (p - p*); distance contracts
        # by (1 - 2 lr) each step
        p_star = np.array([3.0, -1.0])
        p = {"p": np.array([0.0, 0.0])}
        lr = 0.1
        for t in range(1, 30):
            p = sgd_step(p, {"p": 2.0 * (p["p"] - p_star)}, lr)
            expected = p_star + (1 - 2 * lr) ** t * (np.zeros(2) - p_star)
            assert np.max(np.abs(p["p"] - expected)) < 1e-12

    def test_frozen_entries_keep_identity(self):
        params = {"a": np.array([1.0]), "b": np.array([2.0])}
        out = sgd_step(params, {"a": np.ones(1), "b": np.ones(1)}, 0.5,
                       frozen={"b"})
        assert out["a"][0] == 0.5
        assert out["b"] is params["b"]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, 0.1)


class TestGradCheck:
    def test_linear_loss_exact(self):
        coef = np.array([1.5, -2.0, 0.5])

        def fn(params):
            return float(coef @ params["w"]), {"w": coef}

        err = grad_check(fn, {"w": np.array([1.0, 1.0, 1.0])}, 1e-5,
                         make_rng(4))
        assert err < 1e-9

    def test_softmax_cross_entropy(self):
        rng = make_rng(5)
        w0 = rng.normal(0, 1, 3)

        def fn(params):
            p = softmax(params["w"])
            loss = -math.log(p[1])
            grad = p.copy()
            grad[1] -= 1.0
            return loss, {"w": grad}

        assert grad_check(fn, {"w": w0}, 1e-5, make_rng(6)) < 1e-6

    def test_detects_corrupted_gradient(self):
        rng = make_rng(7)
        w0 = rng.normal(0, 1, 3)

        def fn(params):
            p = softmax(params["w"])
            loss = -math.log(p[1])
            grad = p.copy()
            grad[1] -= 1.0
            return loss, {"w": grad * 1.01}

        assert grad_check(fn, {"w": w0}, 1e-5, make_rng(8)) > 1e-3

    def test_epsilon_range_enforced(self):
        with pytest.raises(InvalidParameter):
            grad_check(lambda p: (0.0, {}), {}, 1e-8, make_rng(0))


class TestSystemGradients:
    def test_moe_and_prag_gradients_pass_fd_check(self):
        for seed in range(8):
            system = randomized(tiny_system(seed=seed), seed)
            rng = make_rng(100 + seed)
            xs = rng.normal(0, 1, (3, 4))
            ys = rng.integers(0, 3, 3)
            daggs = rng.normal(0, 1, (3, 4))

            def f_moe(params):
                system._set_params(params)
                return system.loss_and_grads_moe(xs, ys)

            def f_prag(params):
                system._set_params(params)
                return system.loss_and_grads_prag(xs, ys, daggs)

            p0 = {k: v.copy() for k, v in system.params().items()}
            assert grad_check(f_moe, p0, 1e-5, make_rng(seed)) < 1e-5
            system._set_params(p0)
            assert grad_check(f_prag, p0, 1e-5, make_rng(seed)) < 1e-5

    def test_zero_alpha_freezes_prediction_parameters(self):
        # when the prediction losses carry zero weight, the step updates
        # nothing, matching a run that optimizes the probes alone
        system = randomized(tiny_system(dpmm_enabled=False))
        system.alpha_t = 0.0
        before = {k: v.copy() for k, v in system.params().items()}
        rng = make_rng(9)
        for _ in range(100):
            system.train_step(rng.normal(0, 1, 4), int(rng.integers(3)))
        after = system.params()
        for name in before:
            assert np.array_equal(before[name], after[name]), name


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(InvalidParameter):
            TrainConfig(lr=0.0)
        with pytest.raises(InvalidParameter):
            TrainConfig(batch=0)


def test_margin_ranking_loss_hand_case():
    # returns order candidates 0 > 1; hinge on the single ordered pair
    conf = [0.55, 0.5]
    returns = [1.0, 0.0]
    assert margin_ranking_loss(conf, returns, margin=0.1) == pytest.approx(
        max(0.0, 0.1 - 0.05), abs=1e-12)
    assert margin_ranking_loss([0.9, 0.1], returns, margin=0.1) == 0.0
    assert margin_ranking_loss([0.5, 0.5], [0.0, 0.0]) == 0.0
