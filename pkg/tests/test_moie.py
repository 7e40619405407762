import math

import numpy as np
import pytest

from midg.autodiff import ContractError, Tensor, default_dtype, gradcheck, gradcheck_params, keyed_rng
from midg.moie import MoIE, MoIEConfig, binary_cross_entropy, grl_schedule


def make(k=3, d_in=6, d_repr=4, lam=1.0, seed=0, dtype=np.float64):
    with default_dtype(dtype):
        return MoIE(MoIEConfig(d_in, k, 5, d_repr, lam), keyed_rng(seed))


def np_mlp(mlp, x):
    h = np.maximum(x @ mlp.fc1.weight.data + mlp.fc1.bias.data, 0)
    return h @ mlp.fc2.weight.data + mlp.fc2.bias.data


def np_moie(model, x):
    logits = np_mlp(model.router, x)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    g = e / e.sum(axis=1, keepdims=True)
    return sum(g[:, [k]] * np_mlp(ex, x) for k, ex in enumerate(model.experts))


class TestRouter:
    def test_single_expert(self):
        w = make(k=1).route(np.random.default_rng(0).normal(size=(3, 6))).data
        np.testing.assert_array_equal(w, np.ones((3, 1)))

    def test_zero_router_uniform(self):
        m = make(k=4)
        m.router.zero_weights()
        w = m.route(np.random.default_rng(1).normal(size=(2, 6))).data
        np.testing.assert_array_equal(w, np.full((2, 4), 0.25))

    def test_simplex_random_inputs(self):
        m = make(k=4, dtype=np.float32)
        x = np.random.default_rng(2).normal(scale=5, size=(1000, 6))
        w = m.route(x).data
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


class TestExperts:
    def test_output_length(self):
        assert make().expert_forward(np.ones((2, 6)), 1).shape == (2, 4)

    def test_distinct_experts(self):
        m = make()
        x = np.random.default_rng(3).normal(size=(2, 6))
        assert not np.allclose(m.expert_forward(x, 0).data, m.expert_forward(x, 1).data)

    def test_index_out_of_range(self):
        with pytest.raises(ContractError):
            make(k=3).expert_forward(np.ones((1, 6)), 3)

    def test_gradcheck_expert(self):
        m = make()
        w = np.random.default_rng(4).normal(size=(2, 4))
        x = Tensor(np.random.default_rng(5).normal(size=(2, 6)), dtype=np.float64)
        assert gradcheck_params(lambda: (m.expert_forward(x, 2) * w).sum(), m.experts[2].parameters()) < 1e-4
        assert gradcheck(lambda x: (m.expert_forward(x, 0) * w).sum(), x.data) < 1e-4


class TestMixture:
    def test_identical_experts(self):
        m = make(k=4)
        for ex in m.experts[1:]:
            ex.load_state_dict(m.experts[0].state_dict())
        x = np.random.default_rng(6).normal(size=(5, 6))
        np.testing.assert_allclose(m(x).data, m.expert_forward(x, 0).data, rtol=1e-12, atol=1e-14)

    def test_single_expert_equals_expert(self):
        m = make(k=1)
        x = np.random.default_rng(7).normal(size=(3, 6))
        np.testing.assert_array_equal(m(x).data, m.expert_forward(x, 0).data)

    def test_convex_hull(self):
        m = make(k=4)
        x = np.random.default_rng(8).normal(size=(200, 6))
        out = m(x).data
        experts = np.stack([m.expert_forward(x, k).data for k in range(4)])
        assert np.all(out >= experts.min(axis=0) - 1e-12)
        assert np.all(out <= experts.max(axis=0) + 1e-12)

    def test_matches_numpy_reference(self):
        m = make(k=3)
        x = np.random.default_rng(9).normal(size=(4, 6))
        np.testing.assert_allclose(m(x).data, np_moie(m, x), rtol=1e-12)


class TestDiscriminator:
    def test_zero_weights_half(self):
        m = make()
        m.discriminator.zero_weights()
        np.testing.assert_array_equal(m.discriminate(np.random.default_rng(10).normal(size=(3, 4))).data, 0.5)

    def test_open_interval(self):
        m = make(dtype=np.float32)
        p = m.discriminate(np.random.default_rng(11).normal(size=(1000, 4))).data
        assert np.all((p > 0) & (p < 1))

    def test_gradcheck(self):
        m = make()
        assert gradcheck(lambda h: m.discriminate(h).log().sum(), np.random.default_rng(12).normal(size=(3, 4))) < 1e-4


class TestDomainLoss:
    def test_single_half(self):
        assert binary_cross_entropy(Tensor([0.5], dtype=np.float64), [1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_pair_half(self):
        loss = binary_cross_entropy(Tensor([0.5, 0.5], dtype=np.float64), [0, 1]).item()
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect_discrimination_limit(self):
        loss = binary_cross_entropy(Tensor([1.0], dtype=np.float64), [1]).item()
        assert 0 <= loss < 1e-6

    def test_saturated_wrong_is_finite(self):
        loss = binary_cross_entropy(Tensor([0.0, 1.0], dtype=np.float64), [1, 0]).item()
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_hand_computed_batch(self):
        m = make(k=3)
        x = np.random.default_rng(13).normal(size=(4, 6))
        d = np.array([0, 1, 1, 0])
        h = np_moie(m, x)
        p = 1 / (1 + np.exp(-np_mlp(m.discriminator, h)[:, 0]))
        expected = -np.mean(d * np.log(p) + (1 - d) * np.log(1 - p))
        assert abs(m.loss_in(x, d).item() - expected) < 1e-10

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            make().loss_in(np.zeros((0, 6)), [])

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
    def test_reversal_sign_on_experts(self, lam):
        m = make(k=2, lam=lam)
        x = Tensor(np.random.default_rng(14).normal(size=(6, 6)), dtype=np.float64)
        d = np.array([0, 1, 0, 1, 1, 0])
        upstream = m.experts + [m.router]

        m.zero_grad()
        m.loss_in(x, d).backward()
        reversed_grads = [p.grad.copy() for e in upstream for p in e.parameters()]
        disc_grads = [p.grad.copy() for p in m.discriminator.parameters()]

        m.zero_grad()
        binary_cross_entropy(m.discriminate(m(x)), d).backward()
        plain_grads = [p.grad.copy() for e in upstream for p in e.parameters()]
        plain_disc = [p.grad.copy() for p in m.discriminator.parameters()]

        for r, g in zip(reversed_grads, plain_grads):
            np.testing.assert_allclose(r, -lam * g, rtol=1e-12, atol=1e-15)
        for r, g in zip(disc_grads, plain_disc):
            np.testing.assert_array_equal(r, g)

    def test_gradcheck_full_module(self):
        m = make(k=2)
        x = Tensor(np.random.default_rng(15).normal(size=(4, 6)), dtype=np.float64)
        # with lambda = 1 the reversed gradient is the gradient of -loss upstream of the GRL
        params = m.discriminator.parameters()
        assert gradcheck_params(lambda: m.loss_in(x, [0, 1, 1, 0]), params) < 1e-4


class TestHead:
    def test_zero_weights_bias(self):
        m = make()
        m.head.zero_weights()
        m.head.fc2.bias.data[:] = 0.37
        np.testing.assert_array_equal(m.predict_in(np.random.default_rng(16).normal(size=(3, 4))).data, 0.37)

    def test_scalar_per_row(self):
        assert make().predict_in(np.ones((5, 4))).shape == (5,)

    def test_gradcheck(self):
        m = make()
        assert gradcheck(lambda h: m.predict_in(h).square().sum(), np.random.default_rng(17).normal(size=(2, 4))) < 1e-4


def test_grl_schedule():
    assert grl_schedule(0.0) == 0.0
    assert grl_schedule(1.0) == pytest.approx(2 / (1 + math.exp(-10)) - 1)
    values = [grl_schedule(p) for p in np.linspace(0, 1, 11)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        MoIEConfig(4, n_experts=0)
    with pytest.raises(ValueError):
        MoIEConfig(4, grl_lambda=-1.0)
