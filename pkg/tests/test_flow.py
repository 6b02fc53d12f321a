import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpsvi import tensor as T
from gpsvi.errors import ConfigError
from gpsvi.flow import (CouplingLayer, FlowStack, flow_forward, flow_inverse, numerical_jacobian,
                        variance_preservation_check)
from gpsvi.nn import Params
from gpsvi.tensor import Tensor


def stack(d, k, seed=0, hidden=None):
    return FlowStack.build(Params(), d, k, hidden, np.random.default_rng(seed))


def doubling_flow():
    return FlowStack([CouplingLayer(2, [0], [1], lambda a: 2.0 * a)])


def zero_flow(d=4, k=3):
    fs = stack(d, k)
    for layer in fs.layers:
        for lin in layer.h.layers:
            lin.W.values = np.zeros_like(lin.W.values)
            lin.b.values = np.zeros_like(lin.b.values)
    return fs


class TestForwardInverse:
    def test_hand_example(self):
        zK, logdet = flow_forward(np.array([1.0, 3.0]), doubling_flow())
        np.testing.assert_array_equal(zK.values, [1.0, 5.0])
        assert logdet == 0.0

    def test_hand_inverse(self):
        np.testing.assert_array_equal(flow_inverse(np.array([1.0, 5.0]), doubling_flow()).values, [1.0, 3.0])

    def test_identity_flow(self):
        z = np.random.default_rng(0).normal(size=(5, 4))
        fs = zero_flow()
        zK, logdet = flow_forward(z, fs)
        np.testing.assert_array_equal(zK.values, z)
        assert logdet == 0.0
        np.testing.assert_array_equal(flow_inverse(z, fs).values, z)

    def test_empty_stack_is_identity(self):
        z = np.ones((2, 3))
        np.testing.assert_array_equal(flow_forward(z, stack(3, 0))[0].values, z)

    @pytest.mark.parametrize("k", [1, 2, 4, 8])
    def test_round_trip(self, k):
        fs = stack(6, k, seed=k)
        z = np.random.default_rng(100 + k).normal(size=(1000, 6)) * 2
        with T.no_grad():
            back = flow_inverse(flow_forward(z, fs)[0], fs).values
        assert np.abs(back - z).max() < 1e-9

    @pytest.mark.parametrize("d", [2, 3, 5, 8])
    def test_jacobian_determinant(self, d):
        fs = stack(d, 4, seed=d)
        for z in np.random.default_rng(d).normal(size=(3, d)):
            assert abs(np.linalg.det(numerical_jacobian(fs, z)) - 1.0) < 1e-6

    def test_layers_alternate(self):
        fs = stack(5, 2)
        np.testing.assert_array_equal(fs.layers[0].A, fs.layers[1].B)
        np.testing.assert_array_equal(fs.layers[0].B, fs.layers[1].A)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 10_000))
    def test_round_trip_property(self, d, k, seed):
        fs = stack(d, k, seed)
        z = np.random.default_rng(seed).normal(size=(4, d))
        np.testing.assert_allclose(flow_inverse(flow_forward(z, fs)[0], fs).values, z, rtol=0, atol=1e-9)


class TestConstruction:
    def test_one_dimension_cannot_split(self):
        with pytest.raises(ConfigError):
            stack(1, 2)
        with pytest.raises(ConfigError):
            flow_forward(np.ones((3, 1)), FlowStack([]))

    def test_partition_must_cover(self):
        with pytest.raises(ConfigError):
            CouplingLayer(3, [0], [1], lambda a: a)
        with pytest.raises(ConfigError):
            CouplingLayer(2, [], [0, 1], lambda a: a)


class TestVariance:
    def test_identity_flow(self):
        rep = variance_preservation_check(zero_flow(), np.zeros(4), np.ones(4), n=100_000)
        assert abs(rep["log_ratio"]) < 1e-12

    def test_linear_shear(self):
        W = Tensor(np.array([[1.5, -0.7], [0.4, 2.0]]))
        fs = FlowStack([CouplingLayer(4, [0, 2], [1, 3], lambda a: T.matmul(a, W))])
        rep = variance_preservation_check(fs, np.array([1.0, -1.0, 0.0, 2.0]), np.array([0.5, 1.0, 2.0, 0.3]),
                                          n=100_000, seed=4)
        assert abs(rep["log_ratio"]) < 3 * rep["log_ratio_se"]
        # the shear does change the marginal variances of the shifted coordinates
        assert rep["var_zK"][1] > 2 * rep["var_z0"][1]

    def test_nonlinear_flow_reports(self):
        rep = variance_preservation_check(stack(4, 4, hidden=16), np.zeros(4), np.ones(4), n=100_000)
        assert np.isfinite(rep["ratio"]) and len(rep["var_zK"]) == 4

    def test_small_budget_rejected(self):
        with pytest.raises(ConfigError):
            variance_preservation_check(zero_flow(), np.zeros(4), np.ones(4), n=1000)


def test_gradients_through_four_layers():
    params = Params()
    fs = FlowStack.build(params, 4, 4, 6, np.random.default_rng(0))
    for t in params.tensors():
        t.values = np.random.default_rng(1).normal(scale=0.5, size=t.shape)
    z = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    w = np.linspace(-1, 1, 12).reshape(3, 4)

    def loss(z, *_):
        return T.sum_(T.tanh(flow_forward(z, fs)[0]) * Tensor(w))

    assert T.grad_check(loss, [z] + params.tensors()) < 1e-4
