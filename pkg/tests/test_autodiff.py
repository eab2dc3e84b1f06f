import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glyphforge import autodiff as ad
from glyphforge.autodiff import Tape, Tensor
from glyphforge.gradcheck import check_function, primitive_cases, rel_err


def grad_of(fn, *arrays):
    xs = [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    with Tape():
        ad.backward(fn(*xs))
    return [x.grad for x in xs]


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    out = ad.matmul(Tensor(a), Tensor(np.eye(4)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_scalar_case():
    a, b = Tensor([[2.0]], requires_grad=True), Tensor([[3.0]], requires_grad=True)
    with Tape():
        c = ad.matmul(a, b)
        ad.backward(ad.scale(ad.sum(c), 5.0))
    assert c.data[0, 0] == 6.0
    assert a.grad[0, 0] == 15.0 and b.grad[0, 0] == 10.0


def test_matmul_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_grad_fd(rng):
    r = check_function("matmul", lambda x: ad.sum(ad.matmul(x[0], x[1])),
                       [rng.uniform(-2, 2, (4, 5)), rng.uniform(-2, 2, (5, 3))], rng)
    assert r.max_rel_err < 1e-6


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel_mixes_channels():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    k = np.zeros((1, 3, 1, 1))
    k[0, :, 0, 0] = 1.0
    out = ad.conv2d(Tensor(x), Tensor(k))
    np.testing.assert_allclose(out.data[:, 0], x.sum(axis=1), rtol=1e-14)


def test_conv_summation_case():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_output_geometry():
    out = ad.conv2d(Tensor(np.zeros((2, 3, 64, 64))), Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 32, 32)


def test_conv_matches_direct_loops(rng):
    x, k = rng.standard_normal((2, 2, 6, 7)), rng.standard_normal((3, 2, 3, 2))
    stride, pad = 2, 1
    out = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (6 + 2 * pad - 3) // stride + 1
    ow = (7 + 2 * pad - 2) // stride + 1
    ref = np.zeros((2, 3, oh, ow))
    for b in range(2):
        for o in range(3):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
                    ref[b, o, i, j] = np.sum(patch * k[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("xs,ks,stride", [((1, 1, 2, 2), (1, 1, 3, 3), 1), ((1, 2, 4, 4), (1, 3, 3, 3), 1),
                                          ((1, 1, 4, 4), (1, 1, 3, 3), 0)])
def test_conv_bad_geometry(xs, ks, stride):
    with pytest.raises(ad.DimensionError):
        ad.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ks)), stride=stride)


# ---------------------------------------------------------------- elementwise

def test_relu_values_and_grads():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with Tape():
        y = ad.relu(x)
        ad.backward(ad.sum(y))
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sigmoid_tanh_at_zero():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0


def test_sigmoid_extremes_are_finite():
    y = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


@pytest.mark.parametrize("op", ["add", "mul"])
def test_broadcast_only_same_shape_or_scalar(op):
    f = getattr(ad, op)
    with pytest.raises(ad.DimensionError):
        f(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    assert f(Tensor(np.ones((2, 3))), 2.0).shape == (2, 3)


def test_affine_bias_shape_error():
    with pytest.raises(ad.DimensionError):
        ad.affine_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


@pytest.mark.parametrize("name", ["relu", "sigmoid", "tanh", "add", "mul", "scale", "affine_bias"])
def test_elementwise_fd(name, rng):
    cases = {c[0]: c for c in primitive_cases(rng)}
    _, fn, arrays = cases[name]
    assert check_function(name, fn, arrays, rng).max_rel_err < 1e-6


# ---------------------------------------------------------------- cross-entropy

@pytest.mark.parametrize("n", [2, 4, 10, 64, 512])
def test_uniform_logits_give_ln_n(n):
    loss = ad.softmax_cross_entropy(Tensor(np.full((3, n), 0.37)), [0, 1, n - 1])
    assert abs(loss.item() - math.log(n)) < 1e-12


def test_confident_logits_give_zero_loss():
    logits = np.zeros((1, 10))
    logits[0, 4] = 100.0
    assert ad.softmax_cross_entropy(Tensor(logits), [4]).item() < 1e-40


def test_cross_entropy_grad_closed_form(rng):
    logits, targets = rng.standard_normal((4, 10)), np.array([1, 0, 9, 3])
    (g,) = grad_of(lambda z: ad.softmax_cross_entropy(z, targets), logits)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[np.arange(4), targets] -= 1.0
    np.testing.assert_allclose(g, p / 4, rtol=1e-12, atol=1e-15)


def test_cross_entropy_fd(rng):
    t = rng.integers(0, 10, 4)
    r = check_function("ce", lambda x: ad.softmax_cross_entropy(x[0], t), [rng.uniform(-2, 2, (4, 10))], rng)
    assert r.max_rel_err < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.lists(st.integers(0, 5), min_size=3, max_size=3))
def test_cross_entropy_nonnegative(logits, targets):
    assert ad.softmax_cross_entropy(Tensor(logits), targets).item() >= 0.0


# ---------------------------------------------------------------- backward

def test_sum_grad_is_ones():
    (g,) = grad_of(ad.sum, np.zeros((2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_accumulation_over_duplicate_use():
    (g,) = grad_of(lambda x: ad.sum(ad.add(x, x)), np.zeros((3, 2)))
    np.testing.assert_array_equal(g, np.full((3, 2), 2.0))


@pytest.mark.parametrize("k", [1, 2, 5])
def test_accumulation_k_consumers(k):
    def f(x):
        total = ad.sum(ad.scale(x, 1.0))
        for i in range(1, k):
            total = ad.add(total, ad.sum(ad.scale(x, float(i + 1))))
        return total
    (g,) = grad_of(f, np.zeros(4))
    np.testing.assert_array_equal(g, np.full(4, k * (k + 1) / 2))


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with Tape():
            ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape(), pytest.raises(ad.ContractError):
        ad.backward(ad.scale(x, 2.0))


def test_backward_without_tape():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.sum(Tensor(np.ones(3), requires_grad=True)))


def test_tape_order_and_reverse_traversal():
    x = Tensor(np.ones(2), requires_grad=True)
    seen = []

    def tagged(name, t):
        def bwd(g):
            seen.append(name)
            return (g,)
        return ad.record(name, t.data.copy(), (t,), bwd)

    with Tape() as tape:
        a = tagged("a", x)
        b = tagged("b", a)
        loss = ad.sum(tagged("c", b))
        ad.backward(loss)
    assert [n.op for n in tape.nodes] == ["a", "b", "c", "sum"]
    assert seen == ["c", "b", "a"]
    positions = {id(n.out): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        assert all(positions.get(id(t), -1) < i for t in node.inputs)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        with ad.no_tape():
            ad.sum(ad.scale(x, 3.0))
    assert len(tape) == 0


def test_debug_mode_catches_non_finite():
    ad.set_debug(True)
    with pytest.raises(ad.NonFiniteError):
        ad.scale(Tensor([1.0, np.inf]), 1.0)


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.data.dtype == np.float64
    ad.set_default_dtype("float32")
    assert Tensor([1.0]).data.dtype == np.float32


def test_embedding_index_errors():
    with pytest.raises(IndexError):
        ad.embedding(Tensor(np.zeros((3, 2))), [3])


def test_embedding_repeated_rows_accumulate():
    (g,) = grad_of(lambda t: ad.sum(ad.embedding(t, [1, 1, 0])), np.zeros((3, 2)))
    np.testing.assert_array_equal(g, [[1, 1], [2, 2], [0, 0]])


def test_independent_tapes_in_threads():
    results = {}

    def work(k):
        x = Tensor(np.full(5, float(k)), requires_grad=True)
        for _ in range(50):
            x.grad = None
            with Tape():
                ad.backward(ad.sum(ad.mul(x, x)))
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(results[k], np.full(5, 2.0 * k))


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(9)
        x = Tensor(r.standard_normal((2, 3, 8, 8)), requires_grad=True)
        k = Tensor(r.standard_normal((4, 3, 3, 3)), requires_grad=True)
        with Tape():
            y = ad.global_avg_pool(ad.relu(ad.conv2d(x, k, stride=2, padding=1)))
            ad.backward(ad.softmax_cross_entropy(y, [0, 3]))
        return y.data.tobytes() + x.grad.tobytes() + k.grad.tobytes()
    assert run() == run()


# ---------------------------------------------------------------- FD property

@pytest.mark.parametrize("case", [c[0] for c in primitive_cases(np.random.default_rng(0))])
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_fd_property(case, seed):
    r = np.random.default_rng(seed)
    name, fn, arrays = {c[0]: c for c in primitive_cases(r)}[case]
    result = check_function(name, fn, arrays, r)
    assert result.max_rel_err < 1e-5, result.line()


def test_rel_err_guards_small_denominators():
    assert rel_err(1e-12, 0.0) == pytest.approx(1e-4)
    assert rel_err(1.0, 1.0) == 0.0


def test_closed_tape_releases_history():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.sum(ad.mul(x, x))
    with pytest.raises(ad.ContractError):
        ad.backward(loss)


def test_training_memory_is_flat():
    import gc
    import weakref
    refs = []
    x = Tensor(np.ones((64, 64)), requires_grad=True)
    gc.disable()
    try:
        for _ in range(5):
            with Tape():
                y = ad.sigmoid(ad.mul(x, x))
                refs.append(weakref.ref(y))
                ad.backward(ad.sum(y))
            del y
        assert all(r() is None for r in refs)
    finally:
        gc.enable()
