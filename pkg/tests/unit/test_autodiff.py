"""
Unit tests for the reverse-mode autodiff engine.
"""

import warnings

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tensor, gradcheck, numerical_gradient
from errors import InvalidArgumentError

TOLERANCE = 1e-4


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTensorBasics:
    """Test Tensor bookkeeping functionality."""

    @pytest.mark.unit
    def test_grad_accumulates_over_reuse(self):
        """Test that a tensor used twice gets both contributions."""
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [6.0])

    @pytest.mark.unit
    def test_diamond_graph(self):
        """Test gradients through a shared intermediate."""
        x = Tensor(2.0, requires_grad=True)
        y = x * 3.0
        (y * y + y).backward()
        assert x.grad == pytest.approx(3.0 * (2.0 * 6.0 + 1.0))

    @pytest.mark.unit
    def test_backward_needs_scalar(self):
        """Test that backward on a vector is invalid."""
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            (x * 2.0).backward()

    @pytest.mark.unit
    def test_constants_get_no_grad(self):
        """Test that tensors without requires_grad stay untouched."""
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.full(2, 5.0))
        (x * c).sum().backward()
        assert c.grad is None
        assert np.allclose(x.grad, [5.0, 5.0])

    @pytest.mark.unit
    def test_zero_grad_and_detach(self):
        """Test that zero_grad clears and detach cuts the graph."""
        x = Tensor(np.ones(2), requires_grad=True)
        x.sum().backward()
        x.zero_grad()
        assert x.grad is None
        d = x.detach()
        assert not d.requires_grad
        assert np.array_equal(d.data, x.data)

    @pytest.mark.unit
    def test_broadcast_gradient(self):
        """Test that broadcast operands receive summed gradients."""
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a + b).sum().backward()
        assert np.allclose(b.grad, [3.0] * 4)
        assert a.grad.shape == (3, 4)

    @pytest.mark.unit
    def test_incompatible_shapes(self):
        """Test that bad broadcasts and matmuls name both shapes."""
        with pytest.raises(InvalidArgumentError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))
        with pytest.raises(InvalidArgumentError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.unit
    def test_reshape_error(self):
        """Test that impossible reshapes are invalid."""
        with pytest.raises(InvalidArgumentError):
            Tensor(np.ones(6)).reshape(4, 2)


class TestForwardValues:
    """Test forward computations of individual operations."""

    @pytest.mark.unit
    def test_softmax_rows_sum_to_one(self, rng):
        """Test that softmax rows sum to one."""
        y = ad.softmax(Tensor(rng.normal(size=(5, 7)) * 10.0), axis=-1)
        assert np.max(np.abs(y.data.sum(axis=1) - 1.0)) < 1e-12

    @pytest.mark.unit
    def test_sigmoid_is_stable(self):
        """Test that extreme inputs do not overflow."""
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            y = ad.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        assert np.allclose(y.data, [0.0, 0.5, 1.0])

    @pytest.mark.unit
    def test_mse_of_equal_inputs(self, rng):
        """Test that mse(x, x) is zero with zero gradient."""
        x = _param(rng, 4)
        loss = ad.mse(x, x)
        loss.backward()
        assert loss.item() == 0.0
        assert np.allclose(x.grad, 0.0)

    @pytest.mark.unit
    def test_mse_shape_mismatch(self):
        """Test that mse requires equal shapes."""
        with pytest.raises(InvalidArgumentError):
            ad.mse(Tensor(np.ones(3)), Tensor(np.ones(4)))

    @pytest.mark.unit
    def test_global_avg_pool(self):
        """Test channel-wise spatial means."""
        x = Tensor(np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3))
        assert np.allclose(ad.global_avg_pool(x).data, [2.5, 8.5])
        with pytest.raises(InvalidArgumentError):
            ad.global_avg_pool(Tensor(np.ones((2, 2))))

    @pytest.mark.unit
    def test_conv2d_matches_direct_sum(self, rng):
        """Test convolution output against an explicit loop."""
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        assert out.shape == (3, 3, 3)
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    expected = np.sum(w[o] * xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]) + b[o]
                    assert out[o, i, j] == pytest.approx(expected)

    @pytest.mark.unit
    def test_conv2d_shape_errors(self):
        """Test that channel mismatches and oversized kernels are invalid."""
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestGradients:
    """Test analytic gradients against central finite differences."""

    @pytest.mark.unit
    def test_conv2d(self, rng):
        """Test conv2d gradients on a random 2x8x8 input."""
        x, w, b = _param(rng, 2, 8, 8), _param(rng, 3, 2, 3, 3), _param(rng, 3)
        R = rng.normal(size=(3, 4, 4))
        assert gradcheck(lambda: ad.mean(ad.conv2d(x, w, b, stride=2, padding=1) * R), [x, w, b]) < TOLERANCE

    @pytest.mark.unit
    def test_matmul_and_elementwise(self, rng):
        """Test matmul, add, sub, mul and div gradients."""
        a, b, c = _param(rng, 3, 4), _param(rng, 4, 2), _param(rng, 3, 2)
        d = Tensor(rng.uniform(1.0, 2.0, size=(3, 2)), requires_grad=True)

        def f():
            return ad.tsum(((a @ b) - c) * c / d)

        assert gradcheck(f, [a, b, c, d]) < TOLERANCE

    @pytest.mark.unit
    def test_nonlinearities(self, rng):
        """Test sigmoid, tanh and square gradients."""
        x = _param(rng, 6)
        R = rng.normal(size=6)
        assert gradcheck(lambda: ad.tsum(ad.sigmoid(x) * ad.tanh(x) * R + ad.square(x)), [x]) < TOLERANCE

    @pytest.mark.unit
    def test_relu_away_from_kink(self):
        """Test relu gradients at points away from zero."""
        x = Tensor([-1.5, -0.2, 0.3, 2.0], requires_grad=True)
        assert gradcheck(lambda: ad.tsum(ad.relu(x) * Tensor([1.0, 2.0, 3.0, 4.0])), [x]) < TOLERANCE

    @pytest.mark.unit
    def test_softmax(self, rng):
        """Test softmax gradients along the last axis."""
        x = _param(rng, 3, 5)
        R = rng.normal(size=(3, 5))
        assert gradcheck(lambda: ad.tsum(ad.softmax(x, axis=-1) * R), [x]) < TOLERANCE

    @pytest.mark.unit
    def test_shape_operations(self, rng):
        """Test reshape, transpose, getitem, concat and axis means."""
        x, y = _param(rng, 2, 6), _param(rng, 3, 4)
        R = rng.normal(size=(4, 2))

        def f():
            z = ad.concat([ad.transpose(ad.reshape(x, (3, 4))), ad.transpose(y)], axis=1)
            return ad.tsum(ad.mean(z, axis=1, keepdims=True) * z[:, 1:3] * R)

        assert gradcheck(f, [x, y]) < TOLERANCE

    @pytest.mark.unit
    def test_numerical_gradient_of_quadratic(self):
        """Test finite differences on sum(x^2)."""
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        assert np.allclose(numerical_gradient(lambda: ad.tsum(ad.square(x)), x), [2.0, -4.0, 1.0], atol=1e-8)

    @pytest.mark.unit
    def test_gradcheck_detects_wrong_gradient(self):
        """Test that a deliberately wrong backward is caught."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)

        def broken():
            return ad._result(np.sum(x.data**2), (x,), lambda g: x._accumulate(g * x.data))

        assert gradcheck(broken, [x]) > 0.1
