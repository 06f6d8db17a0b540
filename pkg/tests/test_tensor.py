import decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duet import tensor as T
from duet.tensor import Tensor


def param(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


# --- softmax -----------------------------------------------------------------

def test_softmax_symmetric_pair():
    out = T.softmax(Tensor(np.zeros(2))).data
    assert out.tolist() == [0.5, 0.5]


def test_softmax_shift_invariance():
    x, c = 0.3, 1.7
    a = T.softmax(Tensor(np.array([x, x + c]))).data
    b = T.softmax(Tensor(np.array([x - c, x]))).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def _decimal_softmax(v):
    decimal.getcontext().prec = 50
    ex = [decimal.Decimal(float(x)).exp() for x in v]
    tot = sum(ex)
    return np.array([float(e / tot) for e in ex])


@pytest.mark.parametrize("seed", range(5))
def test_softmax_matches_extended_precision(seed):
    v = np.random.default_rng(seed).normal(0, 3, 5)
    np.testing.assert_allclose(T.softmax(Tensor(v)).data, _decimal_softmax(v), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    out = T.softmax(Tensor(np.array(vals))).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0) and np.all(out <= 1)


def test_softmax_monotone():
    v = np.array([0.1, -0.4, 2.0, 0.7])
    base = T.softmax(Tensor(v)).data
    bumped = v.copy()
    bumped[1] += 0.5
    assert T.softmax(Tensor(bumped)).data[1] > base[1]


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(T.NumericalInputError):
        T.softmax(Tensor(np.array([0.0, bad])))
    with pytest.raises(T.NumericalInputError):
        T.log_softmax(Tensor(np.array([0.0, bad])))


def test_softmax_other_axis():
    x = np.random.default_rng(1).normal(size=(3, 4))
    out = T.softmax(Tensor(x), axis=0).data
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


# --- grad_check ----------------------------------------------------------------

def test_grad_check_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    f = lambda: x * x
    f().backward()
    assert x.grad == pytest.approx(6.0)
    assert T.grad_check(f, [x]) < 1e-8


def test_grad_check_constant():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    f = lambda: Tensor(np.array(4.0)) + T.tsum(x) * 0.0
    assert T.grad_check(f, [x]) == 0.0


def test_grad_check_rejects_nondeterminism():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(T.DeterminismError):
        T.grad_check(lambda: T.tsum(x * float(rng.random())), [x])


@pytest.mark.parametrize("h", [1e-8, 1e-2])
def test_grad_check_perturbation_range(h):
    x = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.tsum(x), [x], perturbation=h)


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([0.5, -1.2]), requires_grad=True)

    def bad_square(a):
        return T._make(a.data**2, (a,), lambda g: (g * a.data,))   # off by a factor 2

    assert T.grad_check(lambda: T.tsum(bad_square(x)), [x]) > 0.1


# --- per-op gradients ------------------------------------------------------------

OPS = {
    "add": (lambda a, b: T.tsum(T.tanh(a + b)), [(3, 4), (3, 4)]),
    "add_leading_broadcast": (lambda a, b: T.tsum(T.tanh(a + b)), [(2, 3, 4), (4,)]),
    "mul": (lambda a, b: T.tsum(a * b * a), [(2, 5), (2, 5)]),
    "div": (lambda a, b: T.tsum(a / (T.square(b) + 1.0)), [(3,), (3,)]),
    "matmul_2d": (lambda a, b: T.tsum(T.tanh(a @ b)), [(3, 4), (4, 2)]),
    "matmul_batched_weight": (lambda a, b: T.tsum(T.tanh(a @ b)), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: T.tsum(T.tanh(a @ b)), [(2, 3, 4), (2, 4, 2)]),
    "matmul_vec": (lambda a, b: T.tsum(T.tanh(a @ b)), [(3, 4), (4,)]),
    "gelu": (lambda a: T.tsum(T.gelu(a) * a), [(2, 6)]),
    "exp_log": (lambda a: T.tsum(T.log(T.exp(a) + 1.0)), [(5,)]),
    "mean_pool": (lambda a: T.tsum(T.square(T.mean_pool(a, 1))), [(2, 3, 4)]),
    "layer_norm": (lambda a, g, b: T.tsum(T.tanh(T.layer_norm(a, g, b)) * a),
                   [(3, 5), (5,), (5,)]),
    "softmax": (lambda a: T.tsum(T.softmax(a) * T.tanh(a)), [(3, 4)]),
    "log_softmax": (lambda a: T.tsum(T.log_softmax(a)[:, 1]), [(3, 4)]),
    "cosine": (lambda a, b: T.tsum(T.cosine_similarity(a, b)), [(3, 4), (3, 4)]),
    "l2_norm": (lambda a: T.tsum(T.l2_norm(a)), [(3, 4)]),
    "l2_normalize": (lambda a: T.tsum(T.l2_normalize(a) * T.tanh(a)), [(3, 4)]),
    "concat": (lambda a, b: T.tsum(T.square(T.concat([a, b], axis=1)) * 0.5), [(2, 3), (2, 1)]),
    "stack": (lambda a, b: T.tsum(T.tanh(T.stack([a, b], axis=0))), [(2, 3), (2, 3)]),
    "take": (lambda a: T.tsum(T.square(a[np.array([0, 2, 2])])), [(4, 3)]),
    "transpose": (lambda a, b: T.tsum(T.tanh(T.swap_last(a) @ b)), [(2, 3, 4), (3, 2)]),
    "reshape": (lambda a: T.tsum(T.tanh(T.reshape(a, (6, 2)))), [(3, 4)]),
    "broadcast_to": (lambda a: T.tsum(T.tanh(T.broadcast_to(a, (3, 2, 4)))), [(1, 2, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    fn, shapes = OPS[name]
    ps = [param(s, seed=i + 1) for i, s in enumerate(shapes)]
    assert T.grad_check(lambda: fn(*ps), ps) < 1e-6


def test_embedding_gradient_accumulates_repeats():
    w = param((5, 3))
    ids = np.array([[1, 1, 4]])
    assert T.grad_check(lambda: T.tsum(T.tanh(T.embedding(w, ids))), [w]) < 1e-6
    with pytest.raises(IndexError):
        T.embedding(w, np.array([5]))


def test_broadcast_is_leading_only():
    with pytest.raises(ValueError):
        param((3, 4)) + param((3, 1))


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(2).normal(3, 5, (6, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.all(np.abs(out.mean(-1)) < 1e-9)
    var = x.data.var(-1)
    np.testing.assert_allclose(out.var(-1), var / (var + 1e-5), atol=1e-12)
    assert np.all(np.abs(out.var(-1) - 1.0) < 1e-6)


def test_gradients_accumulate_until_zeroed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x).backward()
    (x * x).backward()
    assert x.grad[0] == pytest.approx(8.0)
    x.zero_grad()
    assert x.grad is None


def test_no_grad_builds_no_graph():
    x = param((2,))
    with T.no_grad():
        y = x * x
    assert not y.requires_grad


def test_backward_needs_scalar_or_seed():
    x = param((3,))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


# --- AdamW -------------------------------------------------------------------------

def reference_adamw(x, g, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0, m=0.0, v=0.0, t=1):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return x - lr * wd * x - lr * mhat / (vhat**0.5 + eps), m, v


def test_adamw_zero_grad_no_decay_is_identity():
    p = [np.array([1.5, -2.0])]
    st_ = T.OptimizerState.for_params(p, lr=0.1, weight_decay=0.0)
    new, s2 = T.adamw_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(new[0], p[0])
    assert s2.step == 1


def test_adamw_matches_scalar_reference_on_square():
    x = 1.0
    st_ = T.OptimizerState.for_params([np.array([x])], lr=0.1, weight_decay=0.0)
    new, st_ = T.adamw_step([np.array([x])], [np.array([2 * x])], st_)
    ref, m, v = reference_adamw(x, 2 * x, 0.1)
    assert new[0][0] == pytest.approx(ref, abs=1e-15)
    # and a second step, with decay
    st_.weight_decay = 0.01
    new2, _ = T.adamw_step(new, [2 * new[0]], st_)
    ref2, _, _ = reference_adamw(ref, 2 * ref, 0.1, wd=0.01, m=m, v=v, t=2)
    assert new2[0][0] == pytest.approx(ref2, abs=1e-15)


def test_adamw_decoupled_decay_shrink():
    x = np.array([2.0, -4.0])
    st_ = T.OptimizerState.for_params([x], lr=0.05, weight_decay=0.1)
    new, _ = T.adamw_step([x], [np.zeros(2)], st_)
    np.testing.assert_allclose(x - new[0], 0.05 * 0.1 * x, rtol=0, atol=1e-15)


def test_adamw_poisoned_step_leaves_params():
    p = [np.array([1.0, 2.0])]
    st_ = T.OptimizerState.for_params(p, lr=0.1)
    with pytest.raises(T.PoisonedStepError):
        T.adamw_step(p, [np.array([np.nan, 0.0])], st_)
    assert p[0].tolist() == [1.0, 2.0] and st_.step == 0

    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = T.AdamW([t], lr=0.1)
    t.grad = np.array([0.0, np.inf])
    with pytest.raises(T.PoisonedStepError):
        opt.step()
    assert t.data.tolist() == [1.0, 2.0]


def test_adamw_is_pure_and_replayable():
    rng = np.random.default_rng(3)
    p = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    g = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    st_ = T.OptimizerState.for_params(p, lr=0.01)
    a, sa = T.adamw_step(p, g, st_)
    b, sb = T.adamw_step(p, g, st_)
    for x, y in zip(a + sa.m + sa.v, b + sb.m + sb.v):
        assert x.tobytes() == y.tobytes()
    assert st_.step == 0 and sa.step == 1


def test_adamw_wrapper_skips_decay_for_selected_params():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = T.AdamW([w, b], lr=0.1, weight_decay=0.5, no_decay=lambda p: p.ndim == 1)
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt.step()
    np.testing.assert_allclose(w.data, 1 - 0.1 * 0.5)
    np.testing.assert_array_equal(b.data, 1.0)
    assert opt.state.step == 1


def test_adamw_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = T.AdamW([x], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        T.tsum(x * x).backward()
        opt.step()
    assert np.all(np.abs(x.data) < 0.05)
