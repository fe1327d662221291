import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsrec import tensor as tc
from lsrec.tensor import Tensor

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.standard_normal(shape)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


# -- forward values ---------------------------------------------------------


def test_matmul_identity():
    x = rand(3, 3)
    assert np.allclose(tc.matmul(Tensor(np.eye(3)), Tensor(x)).data, x.astype(np.float32))


def test_matmul_scalar_case():
    assert tc.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    a, b = rand(3, 4), rand(4, 2)
    got = tc.matmul(Tensor(a), Tensor(b)).data
    want = naive_matmul(a, b)
    assert np.max(np.abs(got - want) / np.abs(want)) <= 1e-6 * 10  # float32 storage
    with tc.shadow64():
        got64 = tc.matmul(Tensor(a), Tensor(b)).data
    assert np.max(np.abs(got64 - want) / np.abs(want)) <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        tc.matmul(Tensor(rand(3, 4)), Tensor(rand(3, 2)))


def test_add_refuses_broadcast():
    with pytest.raises(tc.ShapeError):
        tc.add(Tensor(rand(3, 4)), Tensor(rand(4)))


def test_softmax_uniform_row():
    y = tc.softmax(Tensor(np.full((2, 5), 3.7))).data
    assert np.allclose(y, 0.2)


def test_softmax_hand_value():
    with tc.shadow64():
        y = tc.softmax(Tensor([0.0, math.log(3.0)])).data
    assert np.allclose(y, [0.25, 0.75], atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        tc.softmax(Tensor([0.0, np.inf]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = tc.softmax(Tensor(x)).data
    assert np.all(np.abs(y.sum(-1) - 1.0) <= 1e-6)


def test_softmax_mask_zeroes_entries():
    mask = np.array([[True, False, True]])
    y = tc.softmax(Tensor([[1.0, 50.0, 1.0]]), mask).data
    assert y[0, 1] == 0.0 and np.allclose(y[0, [0, 2]], 0.5)


def test_rms_norm_unit_input():
    y = tc.rms_norm(Tensor(np.ones((2, 6))), Tensor(np.ones(6)), eps=0.0).data
    assert np.allclose(y, 1.0)


def test_rms_norm_scale_invariance():
    x = rand(3, 8)
    w = rand(8)
    with tc.shadow64():
        a = tc.rms_norm(Tensor(x), Tensor(w), eps=1e-12).data
        b = tc.rms_norm(Tensor(x * 17.5), Tensor(w), eps=1e-12).data
    assert np.max(np.abs(a - b)) <= 1e-4


def test_rms_norm_direct_formula():
    x, w = rand(4, 5), rand(5)
    with tc.shadow64():
        y = tc.rms_norm(Tensor(x), Tensor(w), eps=1e-5).data
    want = x / np.sqrt((x**2).mean(-1, keepdims=True) + 1e-5) * w
    assert np.max(np.abs(y - want)) <= 1e-6


def test_silu_values():
    with tc.shadow64():
        y = tc.silu(Tensor([0.0, 20.0, 1.0])).data
    assert y[0] == 0.0
    assert abs(y[1] - 20.0) <= 1e-6
    assert abs(y[2] - 1.0 / (1.0 + math.exp(-1.0))) <= 1e-9
    assert round(y[2], 6) == 0.731059


def test_cross_entropy_confident():
    logits = np.full((2, 5), -50.0)
    logits[0, 3] = logits[1, 1] = 50.0
    loss = tc.cross_entropy(Tensor(logits), [3, 1]).item()
    assert loss < 1e-6


def test_cross_entropy_uniform():
    loss = tc.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item()
    assert abs(loss - math.log(4)) < 1e-6


def test_cross_entropy_logsumexp_oracle():
    z = rand(6, 7)
    t = RNG.integers(7, size=6)
    m = np.array([1, 0, 1, 1, 0, 1])
    with tc.shadow64():
        got = tc.cross_entropy(Tensor(z), t, m).item()
    rows = [math.log(sum(math.exp(v) for v in z[i])) - z[i, t[i]] for i in range(6) if m[i]]
    assert abs(got - sum(rows) / len(rows)) <= 1e-6 * abs(got)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        tc.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [0, 0])
    with pytest.raises(IndexError):
        tc.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_stable_at_large_logits():
    z = np.array([[1e4, 0.0, -1e4]])
    loss = tc.cross_entropy(Tensor(z), [1]).item()
    assert math.isfinite(loss) and abs(loss - 1e4) < 1.0


# -- backward ---------------------------------------------------------------


def test_backward_sum():
    x = Tensor(rand(3, 2), requires_grad=True)
    tc.backward(tc.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2), dtype=np.float32))


def test_backward_square():
    xv = rand(4)
    x = Tensor(xv, requires_grad=True)
    tc.backward(tc.sum(tc.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_accumulates_without_reset():
    x = Tensor(rand(3), requires_grad=True)
    loss = tc.sum(tc.mul(x, x))
    tc.backward(loss)
    tc.backward(loss)
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_diamond_visits_once():
    x = Tensor(rand(3), requires_grad=True)
    y = tc.mul(x, x)
    tc.backward(tc.sum(tc.add(y, y)))
    assert np.allclose(x.grad, 4 * x.data)


def test_backward_requires_scalar():
    x = Tensor(rand(3), requires_grad=True)
    with pytest.raises(tc.ShapeError):
        tc.backward(tc.mul(x, x))


def test_no_grad_records_nothing():
    x = Tensor(rand(3), requires_grad=True)
    with tc.no_grad():
        y = tc.mul(x, x)
    assert not y.requires_grad and y.is_leaf


def _mlp_loss(x, w1, w2, wn):
    h = tc.silu(tc.matmul(x, w1))
    h = tc.rms_norm(h, wn)
    return tc.cross_entropy(tc.matmul(h, w2), [0, 2, 1, 3], [1, 1, 0, 1])


def test_composite_mlp_gradcheck():
    errs = tc.gradcheck(_mlp_loss, [rand(4, 5), rand(5, 6), rand(6, 4), rand(6)])
    assert max(errs) <= 1e-4


GRADCHECK_CASES = {
    "add": (lambda a, b: tc.sum(tc.mul(tc.add(a, b), a)), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: tc.sum(tc.mul(tc.sub(a, b), a)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: tc.sum(tc.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: tc.sum(tc.mul(tc.scale(a, -2.5), a)), [(5,)]),
    "matmul_2d": (lambda a, b: tc.sum(tc.silu(tc.matmul(a, b))), [(3, 4), (4, 2)]),
    "matmul_weight": (lambda a, b: tc.sum(tc.silu(tc.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: tc.sum(tc.silu(tc.matmul(a, b))), [(2, 3, 4), (2, 4, 5)]),
    "transpose": (lambda a: tc.sum(tc.silu(tc.transpose(a, (1, 2, 0)))), [(2, 3, 4)]),
    "reshape": (lambda a: tc.sum(tc.silu(tc.reshape(a, (6, 2)))), [(3, 4)]),
    "mean": (lambda a: tc.mean(tc.mul(a, a)), [(3, 4)]),
    "softmax": (lambda a, w: tc.sum(tc.mul(tc.softmax(a), w)), [(3, 5), (3, 5)]),
    "softmax_masked": (
        lambda a, w: tc.sum(tc.mul(tc.softmax(a, np.tril(np.ones((4, 4), bool))), w)),
        [(4, 4), (4, 4)],
    ),
    "rms_norm": (lambda x, w, c: tc.sum(tc.mul(tc.rms_norm(x, w), c)), [(3, 6), (6,), (3, 6)]),
    "silu": (lambda a: tc.sum(tc.silu(a)), [(4, 3)]),
    "rope": (
        lambda a, w: tc.sum(tc.mul(tc.rope(a, np.array([[0, 3, 7]]), 10000.0), w)),
        [(1, 3, 2, 4), (1, 3, 2, 4)],
    ),
    "repeat_heads": (
        lambda a, w: tc.sum(tc.mul(tc.repeat_heads(a, 3, axis=1), w)),
        [(2, 2, 3), (2, 6, 3)],
    ),
    "cross_entropy": (lambda z: tc.cross_entropy(z, [1, 0, 4], [1, 1, 1]), [(3, 5)]),
    "cross_entropy_sum": (
        lambda z: tc.cross_entropy(z, [1, 0, 4], [1, 0, 1], reduction="sum"),
        [(3, 5)],
    ),
}


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_op_gradcheck(name):
    fn, shapes = GRADCHECK_CASES[name]
    errs = tc.gradcheck(fn, [rand(*s) for s in shapes])
    assert max(errs) <= 1e-4, errs


def test_embedding_and_take_rows_gradcheck():
    ids = np.array([[0, 2, 2], [1, 4, 0]])
    w_out = rand(2, 3, 3)

    def fn(w, c):
        e = tc.embedding(w, ids)
        rows = tc.take_rows(tc.reshape(e, (6, 3)), [5, 1, 1])
        return tc.add(tc.sum(tc.mul(e, c)), tc.sum(tc.silu(rows)))

    errs = tc.gradcheck(fn, [rand(5, 3), w_out])
    assert max(errs) <= 1e-4


def test_dropout_gradcheck_with_fixed_mask():
    def fn(a):
        return tc.sum(tc.silu(tc.dropout(a, 0.3, np.random.default_rng(5), True)))

    assert max(tc.gradcheck(fn, [rand(4, 6)])) <= 1e-4


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        tc.embedding(Tensor(rand(4, 2)), [0, 4])


# -- dropout ----------------------------------------------------------------


def test_dropout_eval_is_identity():
    x = Tensor(rand(10, 10))
    assert tc.dropout(x, 0.2, np.random.default_rng(0), train=False) is x


def test_dropout_keep_fraction_and_scale():
    x = Tensor(np.ones(100_000))
    y = tc.dropout(x, 0.2, np.random.default_rng(0), train=True).data
    kept = y != 0
    assert abs(kept.mean() - 0.8) <= 0.01
    assert np.allclose(y[kept], 1.0 / 0.8)


# -- optimizer --------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": Tensor(rand(3, 2), requires_grad=True)}
    before = p["w"].data.copy()
    state = tc.AdamWState(p)
    tc.adamw_step(p, {"w": np.zeros((3, 2), np.float32)}, state, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p["w"].data, before)


def test_adamw_first_step_hand_computed():
    with tc.shadow64():
        p = {"w": Tensor([1.0, -2.0, 0.5], requires_grad=True)}
    g = np.array([0.3, -4.0, 1e-9])
    state = tc.AdamWState(p)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    tc.adamw_step(p, {"w": g}, state, lr, b1, b2, eps, 0.0)
    # m_hat = g, v_hat = g^2 after bias correction
    m_hat = ((1 - b1) * g) / (1 - b1)
    v_hat = ((1 - b2) * g * g) / (1 - b2)
    want = np.array([1.0, -2.0, 0.5]) - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert np.allclose(p["w"].data, want, rtol=0, atol=1e-12)
    # sign-like: large gradients move by ~lr
    assert abs(p["w"].data[0] - (1.0 - lr)) < 1e-6


def test_adamw_decoupled_decay():
    with tc.shadow64():
        p = {"w": Tensor([2.0, -1.0], requires_grad=True)}
    state = tc.AdamWState(p)
    tc.adamw_step(p, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.01)
    assert np.allclose(p["w"].data, [2.0 - 0.1 * 0.01 * 2.0, -1.0 + 0.1 * 0.01 * 1.0])


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    total = tc.clip_grad_norm(g, 1.0)
    assert total == pytest.approx(5.0)
    assert math.sqrt((g["a"] ** 2).sum() + (g["b"] ** 2).sum()) == pytest.approx(1.0, rel=1e-5)
