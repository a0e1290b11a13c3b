import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from choir import autodiff as ad
from choir import checkpoint


def inverse_3x3(m):
    """Adjugate over determinant, written out by cofactors."""
    a, b, c = m[0]
    d, e, f = m[1]
    g, h, i = m[2]
    cof = np.array([
        [e * i - f * h, -(d * i - f * g), d * h - e * g],
        [-(b * i - c * h), a * i - c * g, -(a * h - b * g)],
        [b * f - c * e, -(a * f - c * d), a * e - b * d],
    ])
    det = a * cof[0, 0] + b * cof[0, 1] + c * cof[0, 2]
    return cof.T / det


def numeric_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        fp = f(x)
        x[idx] = old - step
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7))


finite = st.floats(-1, 1, allow_nan=False, allow_infinity=False)


# -- matmul -----------------------------------------------------------------
def test_matmul_identity(rng):
    m = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), m).data, m)


def test_matmul_with_closed_form_inverse(rng):
    for _ in range(20):
        m = rng.standard_normal((3, 3)) + 2 * np.eye(3)
        out = ad.matmul(ad.Tensor(m), ad.Tensor(inverse_3x3(m))).data
        np.testing.assert_allclose(out, np.eye(3), atol=1e-10)


def test_matmul_sum_gradient_is_ones_times_bt(rng):
    a = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = rng.standard_normal((3, 5))
    ad.backward(ad.reduce_sum(ad.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((4, 5)) @ b.T, atol=1e-12)
    num = numeric_grad(lambda x: (x @ b).sum(), a.data.copy())
    assert rel_err(a.grad, num) < 1e-6


def test_matmul_batched_broadcast_gradient(rng):
    a = ad.Tensor(rng.standard_normal((2, 1, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((5, 4, 2)), requires_grad=True)
    res = ad.gradcheck(lambda: ad.reduce_sum(ad.square(ad.matmul(a, b))), {"a": a, "b": b},
                       coords_per_tensor=None)
    assert res.passed(1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(np.ones((2, 3)), np.ones((4, 2)))


# -- elementwise ------------------------------------------------------------------
@given(arrays(np.float64, (3, 4), elements=finite))
def test_add_zero_and_mul_one_are_identities(x):
    np.testing.assert_array_equal(ad.add(x, 0.0).data, x)
    np.testing.assert_array_equal(ad.mul(x, 1.0).data, x)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_mul_gradient_matches_finite_differences(x, y):
    a = ad.Tensor(x, requires_grad=True)
    ad.backward(ad.reduce_sum(ad.mul(a, y)))
    num = numeric_grad(lambda v: (v * y).sum(), x.copy())
    np.testing.assert_allclose(a.grad, num, rtol=1e-6, atol=1e-9)


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        ad.div(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 0.0]))


def test_elementwise_gradchecks(rng):
    x = ad.Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
    y = ad.Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)
    cases = {
        "add": lambda: ad.add(x, y),
        "sub": lambda: ad.sub(x, y),
        "mul": lambda: ad.mul(x, y),
        "div": lambda: ad.div(x, y),
        "neg": lambda: ad.neg(x),
        "scale": lambda: ad.scale(x, 2.5),
        "relu": lambda: ad.relu(x),
        "square": lambda: ad.square(x),
        "sqrt": lambda: ad.sqrt(y),
        "exp": lambda: ad.exp(x),
        "clamp_min": lambda: ad.clamp_min(x, 0.1),
    }
    w = rng.standard_normal((3, 4))
    for name, op in cases.items():
        res = ad.gradcheck(lambda: ad.reduce_sum(op() * w), {"x": x, "y": y}, coords_per_tensor=None)
        assert res.passed(1e-6), (name, res)


def test_broadcast_gradients_are_unbroadcast(rng):
    x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    ad.backward(ad.reduce_sum(x + b))
    np.testing.assert_allclose(b.grad, np.full(3, 4.0))


# -- reductions ---------------------------------------------------------------------
def test_reductions_basic():
    assert ad.reduce_sum(ad.Tensor(np.ones(7))).item() == 7
    np.testing.assert_allclose(ad.reduce_mean(ad.Tensor(np.full((3, 5), 2.5)), axis=1).data, 2.5)


def test_mean_gradient_is_one_over_n():
    x = ad.Tensor(np.arange(6.0), requires_grad=True)
    ad.backward(ad.reduce_mean(x))
    np.testing.assert_allclose(x.grad, np.full(6, 1 / 6))


def test_max_tie_break_sends_gradient_to_lowest_index():
    x = ad.Tensor([1.0, 3.0, 3.0, 0.0], requires_grad=True)
    ad.backward(ad.reduce_max(x))
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 0])


def test_invalid_axis_raises():
    with pytest.raises(ValueError):
        ad.reduce_sum(ad.Tensor(np.ones((2, 2))), axis=2)


# -- softmax ------------------------------------------------------------------------
def test_softmax_values():
    np.testing.assert_allclose(ad.softmax(ad.Tensor(np.zeros(4))).data, 0.25)
    np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75])


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(ad.Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_gradient(rng):
    x = ad.Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
    w = rng.standard_normal((4, 5))
    ad.backward(ad.reduce_sum(ad.softmax(x, axis=1) * w))

    def f(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return ((e / e.sum(axis=1, keepdims=True)) * w).sum()
    assert rel_err(x.grad, numeric_grad(f, x.data.copy())) < 1e-6


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ad.softmax(ad.Tensor([0.0, np.inf]))


# -- shape ops ------------------------------------------------------------------------
def test_shape_op_gradchecks(rng):
    x = ad.Tensor(rng.standard_normal((4, 3, 2)), requires_grad=True)
    y = ad.Tensor(rng.standard_normal((4, 3, 2)), requires_grad=True)
    idx = np.array([[0, 2], [3, 3], [1, 0], [2, 1]])
    cases = {
        "reshape": lambda: ad.reshape(x, (6, 4)),
        "transpose": lambda: ad.transpose(x, (2, 0, 1)),
        "concat": lambda: ad.concat([x, y], axis=1),
        "stack": lambda: ad.stack([x, y], axis=0),
        "getitem": lambda: x[1:3, ::2],
        "gather_rows": lambda: ad.gather_rows(x, idx),
        "einsum": lambda: ad.einsum("ncd,ned->nce", x, y),
        "cross": lambda: ad.cross(ad.transpose(x, (0, 2, 1)), ad.transpose(y, (0, 2, 1))),
        "reduce_max": lambda: ad.reduce_max(x, axis=1),
    }
    for name, op in cases.items():
        w = rng.standard_normal(op().shape)
        res = ad.gradcheck(lambda: ad.reduce_sum(op() * w), {"x": x, "y": y}, coords_per_tensor=None)
        assert res.passed(1e-6), (name, res)


def test_gather_rows_range_check():
    with pytest.raises(IndexError):
        ad.gather_rows(ad.Tensor(np.ones((3, 2))), np.array([[0, 3]]))


# -- backward -------------------------------------------------------------------------------
def test_backward_simple_losses(rng):
    x = ad.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    ad.backward(ad.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 3)))
    x.grad = None
    ad.backward(ad.reduce_sum(ad.square(x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_backward_reaches_every_participating_leaf(rng):
    a = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    b = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    unused = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    ad.backward(ad.reduce_sum(a * b + a))
    assert a.grad is not None and b.grad is not None and unused.grad is None


def test_shared_subexpression_accumulates(rng):
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    y = x * 3.0
    ad.backward(ad.reduce_sum(y * y + y))
    np.testing.assert_allclose(x.grad, 18 * x.data + 3)


def test_tape_replay_is_deterministic(rng):
    data = rng.standard_normal((5, 4))
    w0 = rng.standard_normal((4, 3))
    grads = []
    for _ in range(2):
        w = ad.Tensor(w0.copy(), requires_grad=True)
        loss = ad.reduce_sum(ad.softmax(ad.relu(ad.matmul(data, w)), axis=0) * data[:, :3])
        ad.backward(loss)
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_no_grad_records_nothing(rng):
    x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_single_precision_is_preserved():
    x = ad.Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0).dtype == np.float32


# -- gradcheck harness ---------------------------------------------------------------------------
def test_gradcheck_detects_a_wrong_rule(rng):
    x = ad.Tensor(rng.uniform(0.5, 1.0, 4), requires_grad=True)

    def bad():
        out = ad.square(x)
        out._backward = lambda g: (g * x.data,)  # half the true derivative
        return ad.reduce_sum(out)
    assert not ad.gradcheck(bad, [x], coords_per_tensor=None).passed()


def test_gradcheck_skips_probes_across_a_kink():
    x = ad.Tensor([1e-7, 0.5], requires_grad=True)
    res = ad.gradcheck(lambda: ad.reduce_sum(ad.relu(x)), [x], coords_per_tensor=None, step=1e-6)
    assert res.skipped == 1 and res.checked == 1 and res.passed()


# -- checkpoints ------------------------------------------------------------------------------------
def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    entries = {"a.weight": rng.standard_normal((3, 4)), "b": np.array(2.5), "c": rng.standard_normal(7)}
    path = tmp_path / "m.ckpt"
    checkpoint.save_checkpoint(path, entries)
    back = checkpoint.load_checkpoint(path)
    for k, v in entries.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    raw = path.read_bytes()
    assert raw.startswith(b"CHOIRCKPT")
    checkpoint.save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == raw


@pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXXX" + b[9:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_checkpoint_rejects_corruption(tmp_path, mutate):
    path = tmp_path / "m.ckpt"
    checkpoint.save_checkpoint(path, {"w": np.ones((2, 2))})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_checkpoint(path)


def test_module_state_dict_round_trip(rng):
    from choir.vnn import VNLinear

    layer = VNLinear(3, 2, rng)
    other = VNLinear(3, 2, np.random.default_rng(0))
    other.load_state_dict(layer.state_dict())
    np.testing.assert_array_equal(other.weight.data, layer.weight.data)
    with pytest.raises(ValueError):
        other.load_state_dict({"weight": np.ones((3, 3))})
