import numpy as np
import pytest

from crossmpi import tensor as T
from crossmpi.tensor import (
    GradCheckError,
    ShapeError,
    Tensor,
    backward,
    grad_check,
)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_dft2(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0.0 + 0.0j
            for i in range(h):
                for j in range(w):
                    acc += x[i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
            out[u, v] = acc
    return out


class TestValues:
    def test_matmul_identity(self):
        a = np.array([[2.0, -1.0], [0.5, 3.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_hand_value(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_matmul_against_naive(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_broadcast_bias(self):
        out = T.add(Tensor(np.ones((3, 2))), Tensor(np.array([1.0, 2.0])))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]])

    def test_trailing_singleton_rejected(self):
        with pytest.raises(ShapeError, match="non-leading"):
            T.mul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 2, 1))))

    def test_softmax_uniform(self):
        s = T.softmax(Tensor(np.zeros((2, 5))))
        np.testing.assert_allclose(s.data, np.full((2, 5), 0.2))

    def test_grid_sample_identity(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(5, 4, 2))
        rows, cols = np.meshgrid(np.arange(5.0), np.arange(4.0), indexing="ij")
        out = T.grid_sample(Tensor(img), rows, cols)
        np.testing.assert_array_equal(out.data, img)

    def test_grid_sample_zero_outside(self):
        img = np.ones((3, 3, 1))
        out = T.grid_sample(Tensor(img), np.array([[-5.0]]), np.array([[1.0]]))
        assert out.data[0, 0, 0] == 0.0

    def test_clamp(self):
        out = T.clamp(Tensor(np.array([-1.0, 0.5, 2.0])), 0.0, 1.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])


class TestBackward:
    def test_square_sum(self):
        x = Tensor(np.array([3.0]), tracked=True)
        grads = backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(grads[x], [6.0])

    def test_masked_coordinate_exactly_zero(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), tracked=True)
        mask = Tensor(np.array([0.0, 1.0, 1.0]))
        grads = backward(T.sum_all(T.mul(mask, x)))
        assert grads[x][0] == 0.0
        np.testing.assert_array_equal(grads[x], [0.0, 1.0, 1.0])

    def test_mean_gradient(self):
        x = Tensor(np.arange(4.0), tracked=True)
        grads = backward(T.mean_all(x))
        np.testing.assert_array_equal(grads[x], [0.25, 0.25, 0.25, 0.25])

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), tracked=True)
        with pytest.raises(ShapeError, match="scalar"):
            backward(T.mul(x, x))

    def test_grad_accumulates_across_calls(self):
        x = Tensor(np.array([2.0]), tracked=True)
        backward(T.sum_all(T.mul(x, x)))
        backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [8.0])

    def test_reused_node_gradient(self):
        x = Tensor(np.array([3.0]), tracked=True)
        y = T.mul(x, x)
        grads = backward(T.sum_all(T.add(y, y)))
        np.testing.assert_allclose(grads[x], [12.0])


PRIMITIVE_CASES = [
    ("add", lambda p: T.sum_all(T.add(p, Tensor(np.linspace(0, 1, p.size).reshape(p.shape)))), (3, 4)),
    ("sub", lambda p: T.sum_all(T.mul(T.sub(p, Tensor(np.ones(p.shape) * 0.3)), p)), (3, 4)),
    ("mul", lambda p: T.sum_all(T.mul(p, p)), (3, 4)),
    ("scale", lambda p: T.sum_all(T.scale(p, -1.7)), (2, 5)),
    ("matmul", lambda p: T.sum_all(T.matmul(p, Tensor(np.linspace(-1, 1, 12).reshape(4, 3)))), (3, 4)),
    ("batched_matmul", lambda p: T.sum_all(T.matmul(p, Tensor(np.linspace(-1, 1, 24).reshape(2, 4, 3)))), (2, 3, 4)),
    ("softmax", lambda p: T.sum_all(T.mul(T.softmax(p), Tensor(np.linspace(0, 2, p.size).reshape(p.shape)))), (3, 5)),
    ("log_softmax", lambda p: T.sum_all(T.mul(T.log_softmax(p), Tensor(np.linspace(0, 1, p.size).reshape(p.shape)))), (3, 5)),
    ("relu", lambda p: T.sum_all(T.mul(T.relu(p), p)), (4, 4)),
    ("gelu", lambda p: T.sum_all(T.mul(T.gelu(p), p)), (4, 4)),
    ("mean_axis", lambda p: T.sum_all(T.mul(T.mean_axis(p, 0), Tensor(np.arange(4.0)))), (3, 4)),
    ("sum_axis", lambda p: T.sum_all(T.mul(T.sum_axis(p, 1), Tensor(np.arange(3.0)))), (3, 4)),
    ("narrow", lambda p: T.sum_all(T.mul(T.narrow(p, 0, 1, 2), T.narrow(p, 0, 0, 2))), (4, 3)),
    ("concat", lambda p: T.sum_all(T.mul(T.concat([p, p], axis=1), Tensor(np.linspace(0, 1, 24).reshape(3, 8)))), (3, 4)),
    ("reshape", lambda p: T.sum_all(T.mul(T.reshape(p, (2, 6)), Tensor(np.linspace(0, 1, 12).reshape(2, 6)))), (3, 4)),
    ("transpose", lambda p: T.sum_all(T.mul(T.transpose(p, (1, 0)), Tensor(np.linspace(0, 1, 12).reshape(4, 3)))), (3, 4)),
    ("sqrt", lambda p: T.sum_all(T.sqrt(T.add(T.mul(p, p), Tensor(np.full(p.shape, 0.1))))), (3, 3)),
    ("conv2d", lambda p: T.sum_all(T.mul(T.conv2d(p, np.array([[0.1, 0.2, 0.1], [0.2, 0.4, 0.2], [0.1, 0.2, 0.1]])), p)), (5, 5, 2)),
    ("grid_sample", lambda p: T.sum_all(T.grid_sample(p, np.array([[0.5, 1.25], [2.0, 3.75]]), np.array([[0.5, 2.5], [1.0, 0.25]]))), (5, 4, 2)),
    ("layer_norm", lambda p: T.sum_all(T.mul(T.layer_norm(p, Tensor(np.linspace(0.5, 1.5, p.shape[-1])), Tensor(np.zeros(p.shape[-1]))), Tensor(np.linspace(0, 1, p.size).reshape(p.shape)))), (3, 6)),
    ("dft2_mag", lambda p: T.sum_all(T.complex_abs(*T.dft2(p))), (4, 4)),
    ("embedding", lambda p: T.sum_all(T.mul(T.embedding(p, np.array([0, 2, 2, 1])), Tensor(np.linspace(0, 1, 12).reshape(4, 3)))), (3, 3)),
    ("gather_rows", lambda p: T.sum_all(T.gather_rows(p, np.array([1, 0, 2]))), (3, 4)),
]


@pytest.mark.parametrize("name,fn,shape", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_primitive_gradients_match_finite_differences(name, fn, shape, seed):
    rng = np.random.default_rng(100 + seed)
    point = Tensor(rng.normal(scale=0.8, size=shape) + 0.05)
    assert grad_check(fn, point, 1e-5) < 1e-4


def test_grad_check_quadratic_tight():
    err = grad_check(lambda p: T.sum_all(T.mul(p, p)), Tensor(np.array([3.0])), 1e-5)
    assert err < 1e-6


def test_grad_check_reports_non_finite():
    def bad(p):
        return T.sum_all(T.mul(T.sqrt(p), p))

    with pytest.raises(GradCheckError):
        grad_check(bad, Tensor(np.array([-1.0])), 1e-5)


class TestDFT:
    def test_zero_image(self):
        re, im = T.dft2(Tensor(np.zeros((4, 4))))
        assert not re.data.any() and not im.data.any()

    def test_impulse_flat_spectrum(self):
        x = np.zeros((4, 4))
        x[0, 0] = 0.5
        re, im = T.dft2(Tensor(x))
        np.testing.assert_allclose(np.hypot(re.data, im.data), np.full((4, 4), 0.5), atol=1e-12)

    def test_constant_image_dc_only(self):
        re, im = T.dft2(Tensor(np.full((8, 8), 0.3)))
        mag = np.hypot(re.data, im.data)
        assert mag[0, 0] == pytest.approx(64 * 0.3, rel=1e-12)
        rest = mag.copy()
        rest[0, 0] = 0.0
        assert np.abs(rest).max() < 1e-12

    @pytest.mark.parametrize("shape", [(2, 2), (4, 4), (8, 8), (16, 16), (3, 5), (7, 4), (16, 12), (1, 1), (5, 16)])
    def test_matches_naive_oracle(self, shape):
        rng = np.random.default_rng(shape[0] * 31 + shape[1])
        x = rng.uniform(-1, 1, size=shape)
        re, im = T.dft2(Tensor(x))
        ref = naive_dft2(x)
        np.testing.assert_allclose(re.data, ref.real, atol=1e-9)
        np.testing.assert_allclose(im.data, ref.imag, atol=1e-9)

    @pytest.mark.parametrize("shape", [(4, 4), (8, 8), (6, 10), (16, 16)])
    def test_parseval(self, shape):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, size=shape)
        re, im = T.dft2(Tensor(x))
        spatial = float((x**2).sum())
        spectral = float((re.data**2 + im.data**2).sum()) / (shape[0] * shape[1])
        assert abs(spatial - spectral) / spatial < 1e-9

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradient_of_spectrum_functional(self, seed):
        rng = np.random.default_rng(seed)
        wr = rng.normal(size=(4, 4))
        wi = rng.normal(size=(4, 4))

        def f(p):
            re, im = T.dft2(p)
            return T.sum_all(T.add(T.mul(re, Tensor(wr)), T.mul(im, Tensor(wi))))

        assert grad_check(f, Tensor(rng.normal(size=(4, 4))), 1e-5) < 1e-4
