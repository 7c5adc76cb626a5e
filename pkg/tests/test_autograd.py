import numpy as np
import pytest

from warpadapt import autograd as ag
from warpadapt.autograd import Tensor, backward, grad_check, make_tensor, no_grad, topo_order
from warpadapt.errors import ShapeError, UsageError


def rand(shape, seed=0, lo=-2.0, hi=2.0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype))


class TestMakeTensor:
    def test_zero_case(self):
        t = make_tensor((1, 1, 2, 2), [0, 0, 0, 0])
        assert t.shape == (1, 1, 2, 2)
        assert t.grad is None
        assert np.all(t.data == 0)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            make_tensor((1, 1, 2, 2), [1, 2, 3])

    def test_value_count(self):
        t = make_tensor((2, 3, 4, 4), list(range(96)))
        assert t.data.size == 96

    def test_rank_enforced(self):
        with pytest.raises(ShapeError):
            make_tensor((2, 3, 4), list(range(24)))


class TestBackward:
    def test_mean_of_square(self):
        x = make_tensor((1, 1, 1, 1), [3.0], requires_grad=True)
        loss = ag.mul(x, x).mean()
        backward(loss)
        assert np.allclose(x.grad, [[[[6.0]]]])

    def test_linear_disjoint_leaves(self):
        x = make_tensor((1, 1, 2, 2), [1, 2, 3, 4], requires_grad=True)
        y = make_tensor((1, 1, 2, 2), [5, 6, 7, 8], requires_grad=True)
        loss = ag.add(x, y).sum()
        backward(loss)
        assert np.all(x.grad == 1.0)
        assert np.all(y.grad == 1.0)

    def test_two_branch_accumulation(self):
        x = make_tensor((1, 1, 1, 1), [2.0], requires_grad=True)
        loss = ag.add(ag.mul(x, x), ag.mul_scalar(x, 3.0)).sum()
        backward(loss)
        # d/dx (x^2 + 3x) = 2x + 3
        assert np.allclose(x.grad, [[[[7.0]]]])

    def test_non_scalar_loss_rejected(self):
        x = make_tensor((1, 1, 2, 2), [1, 2, 3, 4], requires_grad=True)
        with pytest.raises(UsageError):
            backward(ag.mul(x, x))

    def test_each_node_visited_once(self):
        x = make_tensor((1, 1, 1, 1), [1.5], requires_grad=True)
        a = ag.mul(x, x)
        b = ag.add(a, a)   # diamond: a consumed twice
        c = ag.add(b, a)
        loss = c.mean()
        order = topo_order(loss)
        assert len(order) == len({id(n) for n in order})
        backward(loss)
        # d/dx 3x^2 = 6x
        assert np.allclose(x.grad, [[[[9.0]]]])

    def test_shared_grad_buffers_not_aliased(self):
        x = make_tensor((1, 1, 1, 1), [1.0], requires_grad=True)
        y = make_tensor((1, 1, 1, 1), [2.0], requires_grad=True)
        s = ag.add(x, y)
        loss = ag.add(ag.mul(s, s), ag.mul(x, x)).sum()
        backward(loss)
        # d/dx (x+y)^2 + x^2 = 2(x+y) + 2x = 8; d/dy = 2(x+y) = 6
        assert np.allclose(x.grad, 8.0)
        assert np.allclose(y.grad, 6.0)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = make_tensor((1, 1, 1, 1), [2.0], requires_grad=True)
        with no_grad():
            y = ag.mul(x, x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_detach(self):
        x = make_tensor((1, 1, 1, 1), [2.0], requires_grad=True)
        y = ag.mul(x, x).detach()
        assert not y.requires_grad
        assert y.item() == 4.0


class TestGradCheck:
    def test_sum_is_exact(self):
        # linear function: no truncation error, only float rounding remains
        x = rand((1, 2, 3, 4), seed=1)
        assert grad_check(lambda t: t.sum(), x, step=1e-3) < 1e-9

    def test_product_chain(self):
        x = rand((1, 2, 3, 4), seed=2)
        err = grad_check(lambda t: ag.mul(t, t).mean(), x, step=1e-3)
        assert err < 1e-8

    def test_sampled_subset(self):
        x = rand((1, 4, 8, 8), seed=3)
        err = grad_check(lambda t: ag.mul(t, t).mean(), x, step=1e-3, sample=16)
        assert err < 1e-8


class TestBroadcast:
    def test_scalar_broadcast_binary(self):
        x = rand((1, 2, 3, 4), seed=4)
        m = x.mean()
        centered = ag.sub(x, m)
        assert centered.shape == x.shape
        err = grad_check(lambda t: ag.mul(ag.sub(t, t.mean()), ag.sub(t, t.mean())).mean(), x)
        assert err < 1e-6

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            ag.add(rand((1, 2, 3, 4)), rand((1, 2, 4, 3)))
