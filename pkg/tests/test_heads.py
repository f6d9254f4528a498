import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifuse import autodiff as ad
from trifuse.errors import ContractError
from trifuse.heads import (DecoderParams, HeadParams, focal_loss, head_forward, init_decoder, init_head,
                           mse_loss, recon_loss, total_loss)

FOCAL_HALF = 0.25 * 0.25 * math.log(2.0)


def bce(logit, y):
    p = 1 / (1 + np.exp(-logit))
    return np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))


class TestHead:
    def test_zero_weights_give_bias(self):
        p = HeadParams(ad.param(np.zeros((4, 3))), ad.param(np.zeros(3)),
                       ad.param(np.zeros((3, 2))), ad.param([0.7, -1.5]))
        out = head_forward(p, ad.constant(np.random.default_rng(0).normal(size=(5, 4))))
        np.testing.assert_array_equal(out.data, np.tile([0.7, -1.5], (5, 1)))

    @pytest.mark.parametrize("task,width", [("classification", 1), ("regression", 2)])
    def test_output_width(self, task, width):
        p = init_head(6, 3, task, np.random.default_rng(0))
        assert head_forward(p, ad.constant(np.zeros(6))).shape == (1, width)

    def test_matches_numpy(self):
        rng = np.random.default_rng(1)
        p = init_head(4, 3, "regression", rng)
        x = rng.normal(size=(2, 4))
        ref = np.maximum(x @ p.W1.data + p.b1.data, 0) @ p.W2.data + p.b2.data
        np.testing.assert_allclose(head_forward(p, ad.constant(x)).data, ref, atol=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(ContractError, match="width 5"):
            head_forward(init_head(4, 3, "classification", np.random.default_rng(0)), ad.constant(np.zeros(5)))

    def test_unknown_task(self):
        with pytest.raises(ContractError):
            init_head(4, 3, "ranking", np.random.default_rng(0))

    def test_bad_output_width(self):
        with pytest.raises(ContractError):
            HeadParams(ad.param(np.zeros((2, 2))), ad.param(np.zeros(2)), ad.param(np.zeros((2, 3))),
                       ad.param(np.zeros(3)))

    def test_grad_check(self):
        rng = np.random.default_rng(2)
        p = init_head(4, 3, "regression", rng)
        x = rng.normal(size=(3, 4))
        leaves = [v.data + rng.normal(scale=0.1, size=v.shape) for v in p.named().values()]

        def f(*ls):
            return mse_loss(head_forward(HeadParams(*ls), ad.constant(x)), np.ones((3, 2)))

        assert ad.grad_check(f, leaves, eps=1e-5) < 1e-4


class TestFocal:
    def test_closed_form(self):
        loss = focal_loss(ad.constant([[0.0]]), [[1]]).data[0]
        assert abs(loss - FOCAL_HALF) < 1e-15
        assert abs(loss - 0.043322) < 1e-6

    def test_negative_label_at_half(self):
        assert abs(focal_loss(ad.constant([[0.0]]), [[0]]).data[0] - 0.75 * 0.25 * math.log(2.0)) < 1e-15

    def test_gamma_zero_alpha_half_is_half_bce(self):
        rng = np.random.default_rng(3)
        z, y = rng.normal(scale=3, size=(20, 1)), rng.integers(0, 2, (20, 1))
        assert abs(focal_loss(ad.constant(z), y, alpha=0.5, gamma=0.0).data[0] - 0.5 * bce(z, y)) < 1e-12

    def test_confident_correct_is_near_zero(self):
        assert focal_loss(ad.constant([[40.0]]), [[1]]).data[0] < 1e-30

    def test_confident_wrong_is_finite(self):
        loss = focal_loss(ad.constant([[-800.0]]), [[1]]).data[0]
        assert math.isfinite(loss) and loss == pytest.approx(0.25 * -math.log(1e-12))

    @pytest.mark.parametrize("alpha,gamma", [(0.0, 2.0), (1.0, 2.0), (0.25, -1.0)])
    def test_bad_parameters(self, alpha, gamma):
        with pytest.raises(ContractError):
            focal_loss(ad.constant([[0.0]]), [[1]], alpha=alpha, gamma=gamma)

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0])
    def test_grad_check(self, gamma):
        rng = np.random.default_rng(4)
        y = rng.integers(0, 2, (6, 1))
        f = lambda z: focal_loss(z, y, gamma=gamma)
        assert ad.grad_check(f, [rng.normal(scale=2, size=(6, 1))], eps=1e-5) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-30, 30), st.integers(0, 1), st.floats(0.01, 0.99), st.floats(0, 5))
    def test_nonnegative(self, z, y, alpha, gamma):
        assert focal_loss(ad.constant([[z]]), [[y]], alpha, gamma).data[0] >= 0

    def test_decreasing_in_p_for_positives(self):
        z = np.linspace(-10, 10, 201)
        losses = [focal_loss(ad.constant([[v]]), [[1]]).data[0] for v in z]
        assert np.all(np.diff(losses) < 0)


class TestMse:
    def test_identity(self):
        assert mse_loss(ad.constant([1.0, 2.0]), [1.0, 2.0]).data[0] == 0.0

    def test_unit(self):
        assert mse_loss(ad.constant([0.0, 0.0]), [1.0, 1.0]).data[0] == 1.0

    def test_quadratic_homogeneity(self):
        a = mse_loss(ad.constant([0.3, -0.1]), [0.0, 0.0]).data[0]
        b = mse_loss(ad.constant([0.6, -0.2]), [0.0, 0.0]).data[0]
        assert b == pytest.approx(4 * a, rel=1e-15)

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        assert mse_loss(ad.constant(x), y).data[0] == mse_loss(ad.constant(y), x).data[0]

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            mse_loss(ad.constant([1.0, 2.0]), [1.0])

    def test_grad_check(self):
        rng = np.random.default_rng(6)
        t = rng.normal(size=(3, 2))
        assert ad.grad_check(lambda p: mse_loss(p, t), [rng.normal(size=(3, 2))], eps=1e-5) < 1e-4


class TestRecon:
    def test_zero_case(self):
        d = DecoderParams(ad.param(np.zeros((4, 6))), ad.param(np.zeros(6)))
        assert recon_loss(d, ad.constant(np.ones(4)), ad.constant(np.zeros(6))).data[0] == 0.0

    def test_exact_reconstruction(self):
        rng = np.random.default_rng(7)
        d = init_decoder(2, rng)
        fused = rng.normal(size=(3, 4))
        target = fused @ d.W_d.data + d.b_d.data
        assert recon_loss(d, ad.constant(fused), ad.constant(target)).data[0] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            recon_loss(init_decoder(2, np.random.default_rng(0)), ad.constant(np.zeros(4)), ad.constant(np.zeros(5)))

    def test_gradient_reaches_fused_input(self):
        rng = np.random.default_rng(8)
        d = init_decoder(2, rng)
        fused = ad.param(rng.normal(size=(2, 4)))
        ad.backward(recon_loss(d, fused, ad.constant(rng.normal(size=(2, 6)))))
        assert np.abs(fused.grad).max() > 0
        f = lambda x: recon_loss(d, x, ad.constant(np.ones((2, 6))))
        assert ad.grad_check(f, [fused.data], eps=1e-5) < 1e-4


class TestTotal:
    def test_lambda_zero_is_task_loss(self):
        z = ad.constant([[0.3]])
        assert total_loss("classification", z, [[1]], ad.constant([5.0]), 0.0).data[0] == \
            focal_loss(z, [[1]]).data[0]

    def test_arithmetic(self):
        # mse of ([0], [sqrt(0.5)]) is 0.5; plus 0.1 * 1.0
        out = total_loss("regression", ad.constant([[0.0, 0.0]]), [[0.5 ** 0.5, 0.5 ** 0.5]],
                         ad.constant([1.0]), 0.1)
        assert out.data[0] == pytest.approx(0.6, abs=1e-15)

    def test_at_least_task_loss(self):
        z = ad.constant([[-0.4]])
        task = focal_loss(z, [[0]]).data[0]
        assert total_loss("classification", z, [[0]], ad.constant([0.2]), 0.5).data[0] >= task

    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            total_loss("regression", ad.constant([[0.0, 0.0]]), [[0, 0]], None, -0.1)

    def test_unknown_task(self):
        with pytest.raises(ContractError):
            total_loss("ranking", ad.constant([[0.0]]), [[0]])
