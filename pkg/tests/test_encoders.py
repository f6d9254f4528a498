import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifuse import autodiff as ad
from trifuse.encoders import GruParams, ModalityEncoding, gru_forward, init_gru
from trifuse.errors import ContractError


def zero_gru(d_in, d_h):
    W = [ad.param(np.zeros((d_in, d_h))) for _ in range(3)]
    U = [ad.param(np.zeros((d_h, d_h))) for _ in range(3)]
    b = [ad.param(np.zeros(d_h)) for _ in range(3)]
    return GruParams(*W, *U, *b)


def numpy_gru(p: GruParams, x, h0):
    """Reference recurrence for one sample, written independently of the library."""
    sig = lambda a: 1 / (1 + np.exp(-a))
    g = {k: v.data for k, v in p.named().items()}
    h, out = h0.copy(), []
    for xt in x:
        r = sig(xt @ g["W_r"] + h @ g["U_r"] + g["b_r"])
        z = sig(xt @ g["W_z"] + h @ g["U_z"] + g["b_z"])
        c = np.tanh(xt @ g["W_h"] + (r * h) @ g["U_h"] + g["b_h"])
        h = (1 - z) * h + z * c
        out.append(h)
    return np.array(out)


class TestGruOracles:
    def test_zero_params_zero_input_stays_zero(self):
        enc = gru_forward(zero_gru(3, 4), np.zeros((5, 3)))
        np.testing.assert_array_equal(enc.H.data, np.zeros((5, 4)))

    def test_zero_params_halve_the_state(self):
        # r = z = 1/2 and the candidate is 0, so h' = h/2 each step
        enc = gru_forward(zero_gru(2, 3), np.ones((3, 2)), h0=np.array([0.8, -0.4, 0.2]))
        expect = np.array([[0.4, -0.2, 0.1], [0.2, -0.1, 0.05], [0.1, -0.05, 0.025]])
        np.testing.assert_allclose(enc.hidden(0), expect, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("fused", [True, False])
    def test_matches_numpy_reference(self, fused):
        rng = np.random.default_rng(11)
        p = init_gru(5, 6, rng)
        x = rng.normal(size=(7, 5))
        h0 = rng.uniform(-0.5, 0.5, 6)
        enc = gru_forward(p, x, h0=h0, fused=fused)
        np.testing.assert_allclose(enc.hidden(0), numpy_gru(p, x, h0), rtol=0, atol=1e-13)

    def test_fused_equals_composed(self):
        rng = np.random.default_rng(2)
        p = init_gru(4, 5, rng)
        x = rng.normal(size=(3, 6, 4))
        a = gru_forward(p, x, fused=True).H.data
        b = gru_forward(p, x, fused=False).H.data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    def test_batch_rows_are_independent(self):
        rng = np.random.default_rng(4)
        p = init_gru(3, 4, rng)
        x = rng.normal(size=(5, 6, 3))
        enc = gru_forward(p, x)
        for b in range(5):
            np.testing.assert_allclose(enc.hidden(b), gru_forward(p, x[b]).hidden(0), rtol=0, atol=1e-14)

    def test_final_is_last_step(self):
        rng = np.random.default_rng(9)
        enc = gru_forward(init_gru(3, 4, rng), rng.normal(size=(2, 5, 3)))
        np.testing.assert_array_equal(enc.final.data, enc.steps[-1].data)
        assert enc.T == 5 and enc.B == 2 and enc.d_h == 4


class TestGruGradients:
    def test_fused_grad_check(self):
        rng = np.random.default_rng(0)
        p = init_gru(3, 4, rng)
        x = rng.normal(size=(2, 5, 3))
        G = rng.normal(size=(10, 4))

        def f(*leaves):
            enc = gru_forward(GruParams(*leaves), x)
            return ad.sum_all(ad.mul(enc.H, ad.constant(G)))

        assert ad.grad_check(f, [v.data for v in p.named().values()], eps=1e-5) < 1e-4

    def test_fused_and_composed_gradients_agree(self):
        rng = np.random.default_rng(1)
        init = init_gru(3, 4, rng)
        x = rng.normal(size=(2, 5, 3))
        grads = []
        for fused in (True, False):
            p = GruParams(*(ad.param(v.data) for v in init.named().values()))
            ad.backward(ad.sum_all(ad.tanh(gru_forward(p, x, fused=fused).H)))
            grads.append([v.grad for v in p.named().values()])
        for a, b in zip(*grads):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)

    def test_composed_path_differentiates_h0(self):
        rng = np.random.default_rng(3)
        p = init_gru(2, 3, rng).named()
        x = rng.normal(size=(4, 2))

        def f(h0):
            frozen = GruParams(*(ad.constant(v.data) for v in p.values()))
            return ad.sum_all(gru_forward(frozen, x, h0=h0, fused=False).H)

        assert ad.grad_check(f, [rng.uniform(-0.5, 0.5, (1, 3))], eps=1e-5) < 1e-4


class TestGruContracts:
    def test_wrong_input_dim(self):
        with pytest.raises(ContractError, match="input dim 4"):
            gru_forward(init_gru(3, 2, np.random.default_rng(0)), np.zeros((5, 4)))

    def test_wrong_h0_shape(self):
        with pytest.raises(ContractError):
            gru_forward(init_gru(3, 2, np.random.default_rng(0)), np.zeros((5, 3)), h0=np.zeros(3))

    def test_bad_param_shapes(self):
        p = zero_gru(3, 4).named()
        p["U_h"] = ad.param(np.zeros((4, 5)))
        with pytest.raises(ContractError):
            GruParams(**p)

    def test_empty_sequence(self):
        with pytest.raises(ContractError):
            gru_forward(zero_gru(3, 4), np.zeros((0, 3)))

    def test_init_bounds(self):
        p = init_gru(10, 16, np.random.default_rng(0))
        for name, v in p.named().items():
            if name.startswith("b_"):
                assert not v.data.any()
            else:
                assert np.abs(v.data).max() <= 0.25


class TestModalityEncoding:
    def test_zeros(self):
        enc = ModalityEncoding.zeros(4, 2, 3)
        assert enc.H.shape == (8, 3) and enc.final.shape == (2, 3)
        assert not enc.H.data.any()

    def test_from_steps_round_trip(self):
        rng = np.random.default_rng(0)
        enc = gru_forward(init_gru(2, 3, rng), rng.normal(size=(2, 4, 2)))
        again = ModalityEncoding.from_steps(enc.steps)
        np.testing.assert_array_equal(again.H.data, enc.H.data)
        np.testing.assert_array_equal(again.final.data, enc.final.data)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_hidden_state_stays_in_open_unit_ball(seed, scale):
    rng = np.random.default_rng(seed)
    p = init_gru(4, 5, rng)
    x = scale * rng.normal(size=(3, 8, 4))
    H = gru_forward(p, x).H.data
    assert np.all(np.abs(H) < 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(3.0, 1e6))
def test_saturated_inputs_stay_in_closed_ball(seed, scale):
    # tanh rounds to exactly +-1 in float64 once its argument passes ~19
    rng = np.random.default_rng(seed)
    H = gru_forward(init_gru(4, 5, rng), scale * rng.normal(size=(3, 8, 4))).H.data
    assert np.all(np.abs(H) <= 1)
