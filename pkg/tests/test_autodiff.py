import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from todkit import autodiff as ad


def randn(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape))


class TestMatmul:
    def test_identity(self):
        eye = ad.Tensor(np.eye(2))
        m = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)

    def test_selector_row(self):
        out = ad.matmul(ad.Tensor([[1.0, 0.0]]), ad.Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_gradient_vs_central_differences(self):
        rng = np.random.default_rng(7)
        b = randn(rng, 4, 2)
        err = ad.gradient_check(
            lambda t: ad.reduce_sum(ad.matmul(t, b)), randn(rng, 3, 4)
        )
        assert err < 1e-5


class TestSoftmaxCrossEntropy:
    def test_uniform_two_way(self):
        loss = ad.softmax_cross_entropy(ad.Tensor([0.0, 0.0]), 0)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct(self):
        # exact value: log(1 + exp(-20))
        loss = ad.softmax_cross_entropy(ad.Tensor([10.0, -10.0]), 0)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20)), rel=1e-12)
        assert loss.item() == pytest.approx(2.06115362e-9, rel=1e-6)

    def test_uniform_four_way(self):
        loss = ad.softmax_cross_entropy(ad.Tensor([1.0, 1.0, 1.0, 1.0]), 2)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ad.softmax_cross_entropy(ad.Tensor([0.0, 1.0]), 2)

    def test_nonnegative_on_random_logits(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            logits = randn(rng, 6)
            t = int(rng.integers(6))
            assert ad.softmax_cross_entropy(logits, t).item() >= 0.0


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(
            ad.l2_normalize(ad.Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-15
        )

    def test_already_unit(self):
        np.testing.assert_allclose(
            ad.l2_normalize(ad.Tensor([1.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0]
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(ad.DegenerateVectorError):
            ad.l2_normalize(ad.Tensor([0.0, 0.0]))

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.floats(0.01, 1000))
    def test_idempotent_and_scale_invariant(self, values, c):
        v = np.asarray(values)
        if np.linalg.norm(v) < 1e-6 or np.linalg.norm(c * v) < 1e-6:
            return
        once = ad.l2_normalize(ad.Tensor(v)).data
        twice = ad.l2_normalize(ad.Tensor(once)).data
        scaled = ad.l2_normalize(ad.Tensor(c * v)).data
        np.testing.assert_allclose(twice, once, atol=1e-12)
        np.testing.assert_allclose(scaled, once, atol=1e-12)


class TestGradientCheck:
    def test_quadratic_exact(self):
        err = ad.gradient_check(
            lambda t: ad.reduce_sum(ad.mul(t, t)), ad.Tensor([1.0, 2.0])
        )
        assert err < 1e-6

    def test_constant_function(self):
        const = ad.Tensor(3.0)
        err = ad.gradient_check(lambda t: ad.mul(const, ad.Tensor(1.0)), ad.Tensor([1.0, 2.0]))
        assert err == 0.0

    def test_step_range_enforced(self):
        with pytest.raises(ValueError):
            ad.gradient_check(lambda t: ad.reduce_sum(t), ad.Tensor([1.0]), h=1e-2)


def _gradcheck_cases(rng):
    """One scalar-valued probe per differentiable op."""
    b = randn(rng, 4, 3)
    w4 = randn(rng, 5, 4)
    gain, bias = randn(rng, 6), randn(rng, 6)
    probe = randn(rng, 3, 6)
    probe3 = randn(rng, 3)
    probe24 = randn(rng, 2, 4)
    probe233 = randn(rng, 2, 3, 3)
    ids = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    return {
        "add": (lambda t: ad.reduce_sum(ad.mul(ad.add(t, b), b)), (4, 3)),
        "sub": (lambda t: ad.reduce_sum(ad.mul(ad.sub(b, t), b)), (4, 3)),
        "mul": (lambda t: ad.reduce_sum(ad.mul(t, b)), (4, 3)),
        "mul_broadcast": (lambda t: ad.reduce_sum(ad.mul(b, t)), (3,)),
        "matmul": (lambda t: ad.reduce_sum(ad.matmul(t, b)), (2, 4)),
        "matmul_batched": (lambda t: ad.reduce_sum(ad.matmul(t, w4)), (3, 2, 5)),
        "transpose": (lambda t: ad.reduce_sum(ad.mul(ad.transpose(t, (1, 0)), b)), (3, 4)),
        "reshape": (lambda t: ad.reduce_sum(ad.mul(ad.reshape(t, (4, 3)), b)), (12,)),
        "reduce_sum_axis": (lambda t: ad.reduce_sum(ad.mul(ad.reduce_sum(t, axis=0), probe3)), (4, 3)),
        "mean_pool": (lambda t: ad.reduce_sum(ad.mean_pool(t, mask)), (2, 4, 3)),
        "relu": (lambda t: ad.reduce_sum(ad.relu(t)), (4, 3)),
        "exp": (lambda t: ad.reduce_sum(ad.exp(t)), (4,)),
        "layer_norm": (lambda t: ad.reduce_sum(ad.mul(ad.layer_norm(t, gain, bias), probe)), (3, 6)),
        "softmax": (lambda t: ad.reduce_sum(ad.mul(ad.softmax(t), probe)), (3, 6)),
        "softmax_masked": (lambda t: ad.reduce_sum(ad.mul(ad.softmax(t, mask), probe24)), (2, 4)),
        "logsumexp": (lambda t: ad.reduce_sum(ad.logsumexp(t)), (3, 6)),
        "embedding": (lambda t: ad.reduce_sum(ad.mul(ad.embedding(t, ids), probe233)), (5, 3)),
        "l2_normalize": (lambda t: ad.reduce_sum(ad.mul(ad.l2_normalize(t), probe)), (3, 6)),
        "softmax_cross_entropy": (lambda t: ad.softmax_cross_entropy(t, 2), (6,)),
        "cross_entropy_rows": (
            lambda t: ad.cross_entropy_rows(t, np.array([1, 0, 2]), np.array([1.0, 1.0, 0.0])),
            (3, 4),
        ),
    }


@pytest.mark.parametrize("name", sorted(_gradcheck_cases(np.random.default_rng(0))))
def test_op_gradient_random_inputs(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    f, shape = _gradcheck_cases(rng)[name]
    for _ in range(3):
        err = ad.gradient_check(f, randn(rng, *shape))
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_attention_gradient():
    rng = np.random.default_rng(11)
    k, v = randn(rng, 2, 3, 5, 4), randn(rng, 2, 3, 5, 4)
    mask = np.ones((2, 1, 3, 5), dtype=bool)
    mask[:, :, :, -1] = False
    err = ad.gradient_check(
        lambda t: ad.reduce_sum(ad.attention(t, k, v, mask)), randn(rng, 2, 3, 3, 4)
    )
    assert err < 1e-4


class TestTensorInvariants:
    def test_nan_rejected(self):
        with pytest.raises(ad.NumericsError):
            ad.Tensor([1.0, float("nan")])

    def test_inf_rejected(self):
        with pytest.raises(ad.NumericsError):
            ad.Tensor([float("inf")])

    def test_row_major_flat_data(self):
        t = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.data.flags["C_CONTIGUOUS"]
        assert math.prod(t.shape) == t.data.size
        np.testing.assert_array_equal(t.data.reshape(-1), [1.0, 2.0, 3.0, 4.0])


class TestTape:
    def test_backward_twice_rejected(self):
        with ad.Tape() as tape:
            x = ad.parameter([1.0, 2.0])
            y = ad.reduce_sum(ad.mul(x, x))
        tape.backward(y)
        with pytest.raises(ad.TapeReuseError):
            tape.backward(y)

    def test_grad_accumulates_over_shared_input(self):
        with ad.Tape() as tape:
            x = ad.parameter([2.0])
            y = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # d/dx = 2x + 1
        tape.backward(y)
        np.testing.assert_allclose(tape.grad(x), [5.0])

    def test_untracked_constant_gets_no_grad(self):
        with ad.Tape() as tape:
            x = ad.parameter([1.0])
            c = ad.Tensor([4.0])
            y = ad.reduce_sum(ad.mul(x, c))
        tape.backward(y)
        np.testing.assert_allclose(tape.grad(c), [0.0])

    def test_distinct_tapes_are_independent(self):
        x = ad.parameter([3.0])
        with ad.Tape() as t1:
            y1 = ad.reduce_sum(ad.mul(x, x))
        with ad.Tape() as t2:
            y2 = ad.reduce_sum(ad.mul(ad.Tensor([2.0]), x))
        t2.backward(y2)
        t1.backward(y1)
        np.testing.assert_allclose(t1.grad(x), [6.0])
        np.testing.assert_allclose(t2.grad(x), [2.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_matches_numpy(m, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, 3)), rng.standard_normal((3, n))
    np.testing.assert_allclose(
        ad.matmul(ad.Tensor(a), ad.Tensor(b)).data, a @ b, atol=1e-12
    )
