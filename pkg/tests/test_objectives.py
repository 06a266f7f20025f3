import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import kstest

from classconf import alm as A
from classconf import model as M
from classconf.exceptions import DomainError, PreconditionError
from classconf.objectives import (BatchSplit, ObjectiveConfig, SizeLossConfig, cact_loss,
                                  classwise_size_terms, conftr_size_loss, cut_loss_hard,
                                  cut_loss_smooth, split_batch, total_training_loss,
                                  weighted_size_loss)
from classconf.scores import SmoothingConfig

from conftest import central_diff, rel_err


def size_cfg(eta=1.0, alpha=0.1, t=0.5, tau=1.0):
    return SizeLossConfig(eta=eta, alpha_train=alpha, smoothing=SmoothingConfig(t, tau))


class TestSplit:
    def test_half(self):
        sp = split_batch(100, 0.5, np.random.default_rng(0))
        assert len(sp.cal_indices) == 50 and len(sp.pred_indices) == 50
        assert not set(sp.cal_indices) & set(sp.pred_indices)

    def test_tiny_batch(self):
        for seed in range(5):
            sp = split_batch(3, 0.5, np.random.default_rng(seed))
            assert len(sp.cal_indices) in (1, 2) and len(sp.pred_indices) >= 1

    def test_clamping(self):
        sp = split_batch(10, 0.99, np.random.default_rng(0))
        assert len(sp.pred_indices) == 1

    def test_deterministic(self):
        a = split_batch(30, 0.5, np.random.default_rng(4))
        b = split_batch(30, 0.5, np.random.default_rng(4))
        np.testing.assert_array_equal(a.cal_indices, b.cal_indices)

    def test_too_small(self):
        with pytest.raises(PreconditionError):
            split_batch(1, 0.5, np.random.default_rng(0))


class TestConftr:
    def test_inactive_hinge(self):
        s = np.full((4, 3), 5.0)
        loss, ds, dq = conftr_size_loss(s, 0.0, size_cfg(eta=1.0, t=0.1))
        assert loss == 0.0 and not ds.any() and dq == 0.0

    def test_saturated_two_labels(self):
        s = np.full((5, 2), -100.0)
        loss, _, _ = conftr_size_loss(s, 0.0, size_cfg(eta=1.0, t=0.1))
        assert loss == pytest.approx(1.0, abs=1e-12)

    def test_gradient_fd(self):
        s = np.random.default_rng(1).uniform(size=(4, 3))
        cfg = size_cfg(eta=0.5, t=0.3)
        _, ds, dq = conftr_size_loss(s, 0.6, cfg)
        num = central_diff(lambda v: conftr_size_loss(v.reshape(4, 3), 0.6, cfg)[0], s.ravel())
        assert rel_err(ds.ravel(), num) < 1e-4
        numq = (conftr_size_loss(s, 0.6 + 1e-6, cfg)[0] - conftr_size_loss(s, 0.6 - 1e-6, cfg)[0]) / 2e-6
        assert dq == pytest.approx(numq, rel=1e-5)

    def test_non_finite_threshold(self):
        with pytest.raises(DomainError):
            conftr_size_loss(np.zeros((1, 2)), math.inf, size_cfg())


class TestClasswise:
    def test_single_class(self):
        s = np.random.default_rng(2).uniform(size=(6, 3))
        d, counts, sizes, _ = classwise_size_terms(s, np.full(6, 1), 0.5, size_cfg(), 3)
        assert d[1] == pytest.approx(sizes.mean(), abs=1e-15)
        assert np.isnan(d[0]) and np.isnan(d[2])

    def test_hand_average(self):
        # saturated sigmoids give sizes (1, 1) for class 0 and 3 for class 1
        s = np.array([[-50.0, 50.0, 50.0], [-50.0, 50.0, 50.0], [-50.0, -50.0, -50.0]])
        d, _, _, _ = classwise_size_terms(s, [0, 0, 1], 0.0, size_cfg(t=0.01), 2)
        np.testing.assert_allclose(d, [1.0, 3.0], atol=1e-12)

    @given(st.integers(0, 1000), st.randoms())
    def test_permutation_invariant(self, seed, rnd):
        r = np.random.default_rng(seed)
        s, y = r.uniform(size=(8, 3)), r.integers(0, 3, 8)
        perm = list(range(8))
        rnd.shuffle(perm)
        a = classwise_size_terms(s, y, 0.5, size_cfg(), 3)[0]
        b = classwise_size_terms(s[perm], y[perm], 0.5, size_cfg(), 3)[0]
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestCactLoss:
    def test_at_target(self):
        st_ = A.AlmState.initial(3, 0.4, 2.0, eta=2.0)
        val, grad = cact_loss(np.full(3, 2.0), st_, "phr")
        assert val == 0.0
        np.testing.assert_array_equal(grad, 0.4 / 2.0)

    def test_second_branch(self):
        st_ = A.AlmState.initial(1, 1.0, 1.0, eta=1.0)
        val, grad = cact_loss([-1.0], st_, "phr")  # z = -2
        assert val == -0.5 and grad[0] == 0.0

    def test_unbounded_growth(self):
        grads = [cact_loss([2.0], A.AlmState.initial(1, 1.0, rho, eta=1.0), "phr")[1][0]
                 for rho in (1.0, 1e3, 1e6)]
        assert grads[0] < grads[1] < grads[2] and grads[2] >= 1e6

    def test_absent_classes_ignored(self):
        st_ = A.AlmState.initial(2, 1.0, 1.0)
        val, grad = cact_loss([np.nan, 3.0], st_, "phr")
        assert val == pytest.approx(1.0 * 2 + 0.5 * 4) and grad[0] == 0.0

    @pytest.mark.parametrize("kind", A.PENALTY_KINDS)
    @given(d=arrays(np.float64, 3, elements=st.floats(0, 5)), bump=st.floats(0, 1))
    def test_monotone(self, kind, d, bump):
        st_ = A.AlmState.initial(3, 0.5, 2.0, eta=1.5)
        a = cact_loss(d, st_, kind)[0]
        b = cact_loss(d + np.array([bump, 0, 0]), st_, kind)[0]
        assert b >= a - 1e-12


class TestWeighted:
    @given(st.integers(0, 1000), st.floats(0.001, 2.0))
    def test_equal_weights_are_scaled_conftr(self, seed, lam):
        r = np.random.default_rng(seed)
        s, y = r.normal(size=(12, 4)), r.integers(0, 4, 12)
        cfg = size_cfg(eta=1.0, t=0.3)
        base, ds, dq = conftr_size_loss(s, 0.2, cfg)
        w, dsw, dqw, _ = weighted_size_loss(s, y, 0.2, cfg, np.full(4, lam))
        assert abs(w - lam * base) <= 1e-9
        np.testing.assert_allclose(dsw, lam * ds, atol=1e-12)
        assert abs(dqw - lam * dq) <= 1e-12


class TestCut:
    def test_uniform_grid(self):
        n = 2000
        assert cut_loss_hard(np.arange(1, n + 1) / (n + 1)) < 1e-3

    def test_all_zero(self):
        assert cut_loss_hard(np.zeros(5)) == 1.0

    def test_two_equal(self):
        assert cut_loss_hard([0.2, 0.2]) == pytest.approx(0.8, abs=1e-15)

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)))
    def test_matches_kstest(self, s):
        assert cut_loss_hard(s) == pytest.approx(kstest(s, "uniform").statistic, abs=1e-12)

    def test_clamped_with_warning(self):
        with pytest.warns(RuntimeWarning):
            assert cut_loss_hard([-0.5, 1.5]) == cut_loss_hard([0.0, 1.0])

    # each supremum is attained next to a grid point on the side the grid can reach
    @pytest.mark.parametrize("scores", [[0.30005, 0.69995], [0.10004, 0.5, 0.90004],
                                        [0.19999, 0.19999, 0.39998, 0.99997]])
    def test_smooth_to_hard(self, scores):
        smooth, _ = cut_loss_smooth(np.array(scores), 1e-7)
        assert abs(smooth - cut_loss_hard(scores)) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_smooth_gradient(self, seed):
        s = np.random.default_rng(seed).uniform(size=9)
        _, g = cut_loss_smooth(s, 0.1)
        num = central_diff(lambda v: cut_loss_smooth(v, 0.1)[0], s)
        assert rel_err(g, num) < 1e-3


def _objective(kind, k=3, lam=0.3, eta=1.0):
    alm = A.AlmState.initial(k, lam, 2.0, eta=eta)
    hr = A.HrState.initial(k, lam)
    return ObjectiveConfig(kind=kind, size=size_cfg(eta=eta, alpha=0.2, t=0.5, tau=1.0),
                           reg_weight=0.2, alm=alm, hr=hr)


def _batch(seed=0, n=8, d=4, k=3):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, d))
    y = np.arange(n) % k
    return x, y


class TestTotalLoss:
    @pytest.mark.parametrize("kind", ["ce", "fl", "conftr", "cut", "cact", "cact_hr"])
    @pytest.mark.parametrize("seed", range(3))
    def test_end_to_end_gradient(self, kind, seed):
        x, y = _batch(seed)
        p = M.init_params(4, 3, (5,), seed=seed)
        cfg = _objective(kind)
        sp = split_batch(len(y), 0.5, np.random.default_rng(seed))
        _, g, _ = total_training_loss(p, x, y, cfg, split=sp)
        num = central_diff(lambda v: total_training_loss(p.with_flat(v), x, y, cfg, split=sp)[0],
                           p.flat())
        assert rel_err(M.flatten_grads(g), num) < 1e-3

    def test_ce_reduction(self):
        x, y = _batch()
        p = M.init_params(4, 3, (5,), seed=0)
        a, ga, _ = total_training_loss(p, x, y, _objective("ce"))
        b, gb = M.loss_and_grad(p, x, y)
        assert a == b
        np.testing.assert_array_equal(M.flatten_grads(ga), M.flatten_grads(gb))

    def test_conftr_zero_weight_is_ce_on_pred(self):
        x, y = _batch(1)
        p = M.init_params(4, 3, (5,), seed=1)
        cfg = _objective("conftr")
        cfg.reg_weight = 0.0
        sp = split_batch(len(y), 0.5, np.random.default_rng(1))
        a, ga, _ = total_training_loss(p, x, y, cfg, split=sp)
        b, gb = M.loss_and_grad(p, x[sp.pred_indices], y[sp.pred_indices])
        assert a == pytest.approx(b, abs=1e-15)
        np.testing.assert_allclose(M.flatten_grads(ga), M.flatten_grads(gb), atol=1e-14)

    def test_needs_split_or_rng(self):
        x, y = _batch()
        with pytest.raises(PreconditionError):
            total_training_loss(M.init_params(4, 3, (), 0), x, y, _objective("conftr"))

    def test_fixed_split_used(self):
        x, y = _batch()
        p = M.init_params(4, 3, (), 0)
        sp = BatchSplit(np.arange(4), np.arange(4, 8))
        a = total_training_loss(p, x, y, _objective("cact"), split=sp)[0]
        b = total_training_loss(p, x, y, _objective("cact"), split=sp)[0]
        assert a == b
