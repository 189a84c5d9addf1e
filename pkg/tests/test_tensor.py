import numpy as np
import pytest

from latentlm import tensor as tz
from latentlm.tensor import Tensor

from _utils import check_gradients, max_rel_error


# -- constructors --------------------------------------------------------------


def test_zeros():
    t = tz.zeros([2, 2])
    assert t.data.tolist() == [[0, 0], [0, 0]]


def test_constant():
    t = tz.full([3], 1.5)
    assert t.data.tolist() == [1.5, 1.5, 1.5]


def test_normal_deterministic_per_seed():
    a = tz.normal([4], 0.0, 1.0, seed=7)
    b = tz.normal([4], 0.0, 1.0, seed=7)
    assert np.array_equal(a.data, b.data)
    c = tz.normal([4], 0.0, 1.0, seed=8)
    assert not np.array_equal(a.data, c.data)


def test_empty_shape_rejected():
    with pytest.raises(ValueError, match=r"scalar tensors must use shape \[1\]"):
        tz.zeros([])


def test_bad_shape_entry_rejected():
    with pytest.raises(ValueError):
        tz.zeros([2, 0])


def test_negative_std_rejected():
    with pytest.raises(ValueError):
        tz.normal([2], 0.0, -1.0, seed=0)


# -- matmul --------------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert (eye @ m).data.tolist() == [[3, 4], [5, 6]]


def test_matmul_direct():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert (a @ b).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_shapes():
    a = tz.zeros([2, 3])
    b = tz.zeros([4, 5])
    with pytest.raises(ValueError, match=r"\[2, 3\].*\[4, 5\]"):
        tz.matmul(a, b)


def test_matmul_gradients_match_finite_differences():
    rng = np.random.Generator(np.random.PCG64(0))
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    r = Tensor(rng.standard_normal((4, 5)))

    worst = check_gradients(lambda: ((a @ b) * r).sum(), [a, b])
    assert worst < 1e-4


def test_matmul_batched_gradients():
    rng = np.random.Generator(np.random.PCG64(1))
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
    r = Tensor(rng.standard_normal((2, 3, 3)))
    worst = check_gradients(lambda: ((a @ b) * r).sum(), [a, b])
    assert worst < 1e-4


# -- softmax -------------------------------------------------------------------


def test_softmax_uniform_on_equal_inputs():
    y = tz.softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(y.data, 0.25, atol=0)


def test_softmax_no_overflow_on_huge_inputs():
    y = tz.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == pytest.approx(1.0)
    assert y.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_sums_to_one():
    rng = np.random.Generator(np.random.PCG64(3))
    y = tz.softmax(Tensor(rng.standard_normal(8) * 5))
    assert abs(y.data.sum() - 1.0) <= 1e-12


def test_softmax_mask_excludes_entries_exactly():
    x = Tensor([1.0, 2.0, 3.0])
    mask = np.array([True, False, True])
    y = tz.softmax(x, mask=mask)
    assert y.data[1] == 0.0
    assert abs(y.data.sum() - 1.0) <= 1e-12
    # masked inputs have no influence at all
    x2 = Tensor([1.0, 999.0, 3.0])
    y2 = tz.softmax(x2, mask=mask)
    assert np.array_equal(y.data, y2.data)


def test_softmax_gradients():
    rng = np.random.Generator(np.random.PCG64(4))
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 5)))
    worst = check_gradients(lambda: (tz.softmax(x, axis=-1) * r).sum(), [x])
    assert worst < 1e-4


# -- layer norm ------------------------------------------------------------


def test_layer_norm_constant_row_zeros():
    x = Tensor([[5.0, 5.0, 5.0]])
    g = tz.full([3], 1.0)
    b = tz.zeros([3])
    y = tz.layer_norm(x, g, b, eps=1e-5)
    assert np.allclose(y.data, 0.0, atol=0)


def test_layer_norm_already_normalized():
    x = Tensor([[1.0, -1.0]])
    y = tz.layer_norm(x, tz.full([2], 1.0), tz.zeros([2]), eps=0.0)
    assert np.allclose(y.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_gradients():
    rng = np.random.Generator(np.random.PCG64(5))
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    g = Tensor(rng.standard_normal(6), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    r = Tensor(rng.standard_normal((4, 6)))
    worst = check_gradients(lambda: (tz.layer_norm(x, g, b) * r).sum(), [x, g, b])
    assert worst < 1e-4


# -- gelu ------------------------------------------------------------------


def test_gelu_zero():
    assert tz.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert abs(tz.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6


def test_gelu_gradients():
    rng = np.random.Generator(np.random.PCG64(6))
    x = Tensor(rng.standard_normal(9) * 2, requires_grad=True)
    r = Tensor(rng.standard_normal(9))
    worst = check_gradients(lambda: (tz.gelu(x) * r).sum(), [x])
    assert worst < 1e-4


# -- cross entropy ---------------------------------------------------------


def test_cross_entropy_confident_is_zero():
    logits = np.full((2, 4), -1e4)
    logits[0, 1] = 1e4
    logits[1, 2] = 1e4
    loss = tz.cross_entropy(Tensor(logits), [1, 2], [True, True])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_is_log_vocab():
    loss = tz.cross_entropy(tz.zeros([3, 4]), [0, 1, 2], [True, True, True])
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_matches_direct_oracle():
    rng = np.random.Generator(np.random.PCG64(7))
    logits = rng.standard_normal((6, 5)) * 3
    targets = rng.integers(0, 5, size=6)
    mask = np.array([True, False, True, True, False, True])
    loss = tz.cross_entropy(Tensor(logits), targets, mask).item()

    # independent route: raw exp-normalize, then -mean(log p[target]) over mask
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean([np.log(p[i, targets[i]]) for i in range(6) if mask[i]])
    assert loss == pytest.approx(expected, abs=1e-10)


def test_cross_entropy_all_masked_errors():
    with pytest.raises(ValueError, match="empty loss"):
        tz.cross_entropy(tz.zeros([2, 3]), [0, 1], [False, False])


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        tz.cross_entropy(tz.zeros([2, 3]), [0, 3], [True, True])


def test_cross_entropy_gradients():
    rng = np.random.Generator(np.random.PCG64(8))
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    targets = rng.integers(0, 4, size=5)
    mask = np.array([True, True, False, True, True])
    worst = check_gradients(lambda: tz.cross_entropy(x, targets, mask), [x])
    assert worst < 1e-4


# -- backward ----------------------------------------------------------------


def test_backward_linear():
    x = Tensor([2.0], requires_grad=True)
    y = x * 3.0
    y.backward()
    assert x.grad.tolist() == [3.0]


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_accumulates_until_zeroed():
    x = Tensor([1.0], requires_grad=True)
    (x * 5.0).backward()
    (x * 5.0).backward()
    assert x.grad.tolist() == [10.0]
    x.zero_grad()
    (x * 5.0).backward()
    assert x.grad.tolist() == [5.0]


def test_backward_diamond_graph_single_traversal():
    # y = a*b + a*c visits a's accumulation through two paths, once each
    a = Tensor([3.0], requires_grad=True)
    b = Tensor([4.0], requires_grad=True)
    c = Tensor([5.0], requires_grad=True)
    y = (a * b + a * c).sum()
    y.backward()
    assert a.grad.tolist() == [9.0]
    assert b.grad.tolist() == [3.0]
    assert c.grad.tolist() == [3.0]


def test_no_grad_skips_graph():
    x = Tensor([1.0], requires_grad=True)
    with tz.no_grad():
        y = x * 2.0
    assert y._prev == ()
    assert y._backward is None


def test_detach_cuts_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    d = x.detach()
    y = (d * d).sum()
    assert y._prev == ()


# -- misc shape ops ------------------------------------------------------------


def test_concat_and_slice_gradients():
    rng = np.random.Generator(np.random.PCG64(9))
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 3)))

    def build():
        cat = tz.concat([a, b], axis=0)
        return (cat[1:4] * r).sum()

    worst = check_gradients(build, [a, b])
    assert worst < 1e-4


def test_bias_add_gradients():
    rng = np.random.Generator(np.random.PCG64(10))
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    r = Tensor(rng.standard_normal((4, 3)))
    worst = check_gradients(lambda: ((x + b) * r).sum(), [x, b])
    assert worst < 1e-4


def test_add_shape_mismatch():
    with pytest.raises(ValueError, match="add shape mismatch"):
        tz.add(tz.zeros([2, 3]), tz.zeros([2]))


def test_div_by_scalar_tensor_gradients():
    rng = np.random.Generator(np.random.PCG64(11))
    x = Tensor(rng.standard_normal(5) + 3.0, requires_grad=True)

    def build():
        s = x.sum()
        return (tz.div(x, s) * Tensor([0.3, -0.2, 0.9, 0.1, 0.5])).sum()

    worst = check_gradients(build, [x])
    assert worst < 1e-4


def test_transpose_gradients():
    rng = np.random.Generator(np.random.PCG64(12))
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    r = Tensor(rng.standard_normal((3, 2, 4)))
    worst = check_gradients(lambda: (x.transpose((1, 0, 2)) * r).sum(), [x])
    assert worst < 1e-4


def test_determinism_of_ops():
    rng = np.random.Generator(np.random.PCG64(13))
    a = rng.standard_normal((3, 3))
    x1 = tz.softmax(Tensor(a)) @ Tensor(a)
    x2 = tz.softmax(Tensor(a)) @ Tensor(a)
    assert np.array_equal(x1.data, x2.data)
