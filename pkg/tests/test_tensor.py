import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsnet.checks import gradcheck
from fbsnet.tensor import (ShapeError, Tensor, add, backward, concat, from_values, full, mean_all,
                           mul, no_grad, permute, scale, split, sub, sum_all, zeros)


def leaf(rng, shape, dtype=np.float64):
    return Tensor(rng.uniform(-1, 1, shape).astype(dtype), requires_grad=True)


def test_constructors():
    assert zeros((1, 1, 2, 2)).values() == [0.0] * 4
    assert full((1, 2, 1, 1), 3.5).values() == [3.5, 3.5]
    assert from_values((1, 1, 1, 3), [1, 2, 3]).values() == [1, 2, 3]
    assert zeros((1, 1, 1, 1)).dtype == np.float32


def test_constructor_errors():
    with pytest.raises(ShapeError):
        zeros((2, 2))
    with pytest.raises(ShapeError):
        from_values((1, 1, 1, 3), [1, 2])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 3)))


def test_add_and_mask_mul():
    a = from_values((1, 2, 1, 1), [1, 2])
    b = from_values((1, 2, 1, 1), [3, 4])
    assert add(a, b).values() == [4, 6]
    x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
    y = mul(x, from_values((1, 2, 1, 1), [0, 1]))
    assert np.all(y.data[0, 0] == 0)
    assert np.array_equal(y.data[0, 1], x.data[0, 1])


def test_broadcast_restricted():
    with pytest.raises(ShapeError):
        add(zeros((1, 2, 3, 3)), zeros((1, 3, 1, 1)))


def test_concat_split_inverse(rng):
    a, b = leaf(rng, (1, 2, 4, 4)), leaf(rng, (1, 3, 4, 4))
    c = concat([a, b], axis=1)
    assert c.shape == (1, 5, 4, 4)
    p, q = split(c, [2, 3], axis=1)
    assert np.array_equal(p.data, a.data) and np.array_equal(q.data, b.data)


def test_fam_descriptor_concat(rng):
    h, w = 5, 7
    col = permute(leaf(rng, (1, 4, h, 1)), (0, 1, 3, 2))
    row = leaf(rng, (1, 4, 1, w))
    assert concat([col, row], axis=3).shape == (1, 4, 1, h + w)


def test_sum_and_square_gradients(rng):
    x = leaf(rng, (2, 3, 4, 5))
    backward(sum_all(x))
    assert np.array_equal(x.grad, np.ones(x.shape))
    x.grad = None
    backward(scale(sum_all(mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_grad_of_product_is_other_factor(rng):
    a, b = leaf(rng, (1, 2, 3, 3)), leaf(rng, (1, 2, 3, 3))
    backward(sum_all(mul(a, b)))
    np.testing.assert_array_equal(a.grad, b.data)
    errs = gradcheck(lambda: mul(a, b), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-5


def test_linearity_detached_operand(rng):
    a, b = leaf(rng, (1, 2, 3, 3)), leaf(rng, (1, 2, 3, 3))
    backward(sum_all(mul(add(a, b), add(a, b))))
    g_joint = a.grad.copy()
    a.grad = None
    bd = b.detach()
    backward(sum_all(mul(add(a, bd), add(a, bd))))
    np.testing.assert_allclose(a.grad, g_joint, rtol=1e-12)


def test_random_composite_graph(rng):
    x, y = leaf(rng, (2, 3, 4, 4)), leaf(rng, (2, 3, 4, 4))
    r = leaf(rng, (1, 3, 1, 1))

    def fn():
        u = mul(sub(x, y), r)
        v = concat([u, permute(x, (0, 1, 3, 2))], axis=1)
        p, q = split(v, [2, 4])
        return add(scale(mul(p, p), 0.3), mul(split(q, [2, 2])[0], mean_all(q)))

    errs = gradcheck(fn, [("x", x), ("y", y), ("r", r)])
    assert max(errs.values()) < 1e-5


def test_no_grad_records_nothing(rng):
    x = leaf(rng, (1, 1, 2, 2))
    with no_grad():
        y = mul(x, x)
    with pytest.raises(Exception):
        backward(sum_all(y))


@given(st.integers(0, 2**31 - 1))
def test_determinism(seed):
    def run():
        r = np.random.default_rng(seed)
        a, b = leaf(r, (1, 2, 3, 3)), leaf(r, (1, 2, 3, 3))
        out = sum_all(mul(add(a, b), a))
        backward(out)
        return out.data.copy(), a.grad.copy(), b.grad.copy()

    for u, v in zip(run(), run()):
        assert np.array_equal(u, v)


def test_independent_tapes_on_threads():
    results = {}

    def work(k):
        r = np.random.default_rng(k)
        a = leaf(r, (1, 2, 8, 8))
        for _ in range(20):
            a.grad = None
            backward(sum_all(mul(a, a)))
        results[k] = np.allclose(a.grad, 2 * a.data)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(results.values()) and len(results) == 4
