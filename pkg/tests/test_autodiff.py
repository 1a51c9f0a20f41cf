"""Per-op correctness of the reverse-mode graph against finite differences."""

import numpy as np
import pytest

from textent import autodiff
from textent.numerics import grad_check


def _check(loss_fn, params, samples=40, h=1e-6, seed=0):
    err = grad_check(loss_fn, params, samples=samples, h=h,
                     rng=np.random.default_rng(seed))
    assert err < 1e-4, f"max relative gradient error {err:.3e}"


def _rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(size=shape) * scale


def test_add_mul_broadcast_grads():
    params = {"a": _rand((3, 4), 1), "b": _rand((4,), 2), "c": _rand((3, 1), 3)}

    def fn(pt):
        return ((pt["a"] + pt["b"]) * pt["c"] * pt["a"]).sum()

    _check(fn, params)


def test_matmul_batched_grads():
    params = {"x": _rand((2, 3, 4), 1), "w": _rand((4, 5), 2)}

    def fn(pt):
        y = pt["x"] @ pt["w"]           # broadcast 2-D operand
        z = y @ y.transpose(0, 2, 1)    # batched matmul
        return (z * z).mean()

    _check(fn, params)


def test_div_sqrt_exp_log_grads():
    params = {"a": np.abs(_rand((5,), 4)) + 0.5, "b": np.abs(_rand((5,), 5)) + 0.5}

    def fn(pt):
        return (autodiff.log(pt["a"]) + autodiff.exp(pt["b"] / pt["a"])
                + autodiff.sqrt(pt["a"])).sum()

    _check(fn, params)


def test_gelu_softplus_grads():
    params = {"x": _rand((4, 6), 6)}

    def fn(pt):
        return (autodiff.gelu(pt["x"]) + autodiff.softplus(pt["x"] * 0.7)).sum()

    _check(fn, params)


def test_softmax_and_log_softmax_grads():
    params = {"x": _rand((3, 5), 7)}
    target = np.array([1, 4, 0])

    def fn(pt):
        p = autodiff.softmax(pt["x"], axis=-1)
        lp = autodiff.log_softmax(pt["x"] * 1.5, axis=-1)
        return (p * p).sum() - lp[np.arange(3), target].mean()

    _check(fn, params)


def test_layer_norm_grads():
    params = {"x": _rand((2, 3, 8), 8), "g": 1.0 + 0.1 * _rand((8,), 9),
              "b": 0.1 * _rand((8,), 10)}

    def fn(pt):
        y = autodiff.layer_norm(pt["x"], pt["g"], pt["b"])
        return (y * y).sum()

    _check(fn, params)


def test_getitem_gather_and_slice_grads():
    params = {"table": _rand((7, 4), 11)}
    idx = np.array([0, 3, 3, 6])  # repeated row exercises scatter-add

    def fn(pt):
        rows = pt["table"][idx]
        head = pt["table"][:, 0]
        return (rows * rows).sum() + head.sum()

    _check(fn, params)


def test_concat_and_reductions_grads():
    params = {"a": _rand((3, 2), 12), "b": _rand((3, 5), 13)}

    def fn(pt):
        joined = autodiff.concat([pt["a"], pt["b"]], axis=-1)
        return joined.mean(axis=0).sum() + (joined * joined).sum(axis=1).mean()

    _check(fn, params)


def test_backward_accumulates_through_shared_nodes():
    x = autodiff.parameter(np.array([2.0, 3.0]))
    y = x * x
    z = (y + y).sum()  # y consumed twice
    z.backward()
    np.testing.assert_allclose(x.grad, 4.0 * x.data)


def test_constants_collect_no_gradient():
    c = autodiff.constant(np.ones(3))
    x = autodiff.parameter(np.ones(3))
    (x * c).sum().backward()
    assert c.grad is None
    np.testing.assert_allclose(x.grad, 1.0)


def test_dtype_preserved_through_graph():
    x = autodiff.parameter(np.ones((2, 2), dtype=np.float32))
    out = autodiff.gelu(x * 2.0 + 1.0).sum()
    assert out.data.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32


def test_matmul_rejects_vectors():
    a = autodiff.parameter(np.ones(3))
    b = autodiff.parameter(np.ones((3, 2)))
    with pytest.raises(ValueError):
        autodiff.matmul(a, b)
