import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofm import diff as D
from conftest import central_diff, rel_err


def test_forward_add():
    g = D.Graph(lambda x, y: x + y)
    out = D.forward(g, {"x": np.array([1.0, 2.0]), "y": np.array([3.0, 4.0])})
    np.testing.assert_array_equal(out["out"], [4.0, 6.0])


def test_forward_sum_of_squares():
    g = D.Graph(lambda x: D.tsum(x * x))
    assert D.forward(g, {"x": np.array([1.0, 2.0, 3.0])})["out"] == 14.0


def test_mlp_matches_straight_line_evaluation(rng):
    ws = [rng.normal(size=(5, 8)), rng.normal(size=(8, 8)), rng.normal(size=(8, 3))]
    bs = [rng.normal(size=8), rng.normal(size=8), rng.normal(size=3)]
    x = rng.normal(size=(4, 5))

    def net(x, w0, w1, w2, b0, b1, b2):
        h = D.tanh(D.matmul(x, w0) + b0)
        h = D.gelu(D.matmul(h, w1) + b1)
        return D.matmul(h, w2) + b2

    inputs = {"x": x, "w0": ws[0], "w1": ws[1], "w2": ws[2], "b0": bs[0], "b1": bs[1], "b2": bs[2]}
    out = D.forward(D.Graph(net), inputs)["out"]

    from scipy.special import erf
    h = np.tanh(x @ ws[0] + bs[0])
    z = h @ ws[1] + bs[1]
    h = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    ref = h @ ws[2] + bs[2]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_vjp_square():
    g = D.Graph(lambda x: x * x)
    assert D.vjp(g, {"x": np.array(3.0)}, np.array(1.0))["x"] == pytest.approx(6.0)


def test_vjp_sum_sin_matches_fd(rng):
    x = rng.normal(size=7)
    g = D.Graph(lambda x: D.tsum(D.sin(x)))
    ad = D.vjp(g, {"x": x}, np.array(1.0))["x"]
    fd = central_diff(lambda v: np.sum(np.sin(v)), x, h=1e-5)
    assert rel_err(ad, fd) < 1e-6


def test_vjp_linear_map_is_transpose(rng):
    A = rng.normal(size=(6, 4))
    v = rng.normal(size=6)
    g = D.Graph(lambda x: D.matmul(D.Tensor(A), x))
    ad = D.vjp(g, {"x": rng.normal(size=(4, 1))}, v[:, None])["x"]
    np.testing.assert_allclose(ad[:, 0], A.T @ v, atol=1e-12)


# Each case: (graph fn, input shapes, positive-input flag)
UNARY = {
    "exp": (D.exp, False), "log": (D.log, True), "sin": (D.sin, False), "cos": (D.cos, False),
    "tanh": (D.tanh, False), "gelu": (D.gelu, False), "neg": (D.neg, False), "square": (D.square, False),
    "power": (lambda a: D.power(a, 1.7), True), "sqrt_via_power": (lambda a: D.power(a, 0.5), True),
}


def _fd_check(fn, inputs, seed, tol=1e-5):
    g = D.Graph(fn)
    out = D.forward(g, inputs)["out"]
    r = np.random.default_rng(seed + 99)
    cot = r.normal(size=np.shape(out))
    grads = D.vjp(g, inputs, cot)
    for name in inputs:
        def f(v, name=name):
            args = dict(inputs)
            args[name] = v
            return float(np.sum(cot * D.forward(g, args)["out"]))
        fd = central_diff(f, inputs[name], h=1e-6)
        assert rel_err(grads[name], fd) < tol, name


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 10 ** 6))
def test_unary_ops_fd(name, seed):
    fn, positive = UNARY[name]
    r = np.random.default_rng(seed)
    x = r.uniform(0.5, 2.0, size=(3, 4)) if positive else r.normal(size=(3, 4))
    _fd_check(lambda x: fn(x), {"x": x}, seed)


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (D.square(b) + 1.0),
    "matmul": lambda a, b: D.matmul(a, D.transpose(b)),
    "einsum": lambda a, b: D.einsum("ij,kj->ik", a, b),
    "concat": lambda a, b: D.concat([a, b], axis=1),
    "broadcast": lambda a, b: a * D.tsum(b, axis=0, keepdims=True),
    "linear": lambda a, b: D.linear(D.reshape(a, (3, 4, 1)), b, D.tsum(b, axis=1)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=st.integers(0, 10 ** 6))
def test_binary_ops_fd(name, seed):
    r = np.random.default_rng(seed)
    _fd_check(BINARY[name], {"a": r.normal(size=(3, 4)), "b": r.normal(size=(3, 4))}, seed)


@given(seed=st.integers(0, 10 ** 6))
def test_shape_ops_fd(seed):
    r = np.random.default_rng(seed)

    def fn(x):
        y = D.reshape(x, (4, 3))
        y = D.transpose(y)[1:, ::2]
        z = D.broadcast_to(D.mean(x, axis=0), (2, 3, 4))
        return D.tsum(z, axis=(0, 2)) + D.tsum(y * y)

    _fd_check(fn, {"x": r.normal(size=(3, 4))}, seed)


@pytest.mark.parametrize("shape,modes", [((2, 2, 8), (3,)), ((2, 2, 8), (5,)), ((2, 2, 7), (4,)),
                                         ((1, 2, 6, 8), (2, 5)), ((1, 2, 6, 7), (3, 4))])
def test_spectral_conv_fd(shape, modes, rng):
    d = len(modes)
    idx = [D.mode_index(n, k, last=(i == d - 1)) for i, (n, k) in enumerate(zip(shape[2:], modes))]
    w = rng.normal(size=(shape[1], 3) + tuple(len(i) for i in idx) + (2,))
    _fd_check(lambda x, w: D.spectral_conv(x, w, modes), {"x": rng.normal(size=shape), "w": w}, 0)


def _dense_spectral_conv(x, w, k):
    # direct DFT matrices, independent of numpy.fft
    n = x.shape[-1]
    j = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(np.arange(k), j) / n)
    xh = np.einsum("bcn,kn->bck", x, F)
    wc = w[..., 0] + 1j * w[..., 1]
    yh = np.einsum("bik,iok->bok", xh, wc)
    c = np.where(np.arange(k) == 0, 1.0, 2.0)
    if n % 2 == 0 and k > n // 2:
        c[n // 2] = 1.0
    out = np.einsum("bok,kn->bon", yh * c, np.conj(F)) / n
    return out.real


@pytest.mark.parametrize("n,k", [(16, 5), (16, 9), (15, 8)])
def test_spectral_conv_dense_oracle(n, k, rng):
    x = rng.normal(size=(2, 3, n))
    w = rng.normal(size=(3, 2, k, 2))
    if n % 2 == 0 and k > n // 2:
        w[:, :, n // 2, 1] = 0.0  # Nyquist coefficient must be real to be representable
    w[:, :, 0, 1] = 0.0
    out = D.spectral_conv(D.Tensor(x), w, (k,)).data
    np.testing.assert_allclose(out, _dense_spectral_conv(x, w, k), atol=1e-10)


def test_spectral_conv_resolution_consistent(rng):
    # a band-limited input sampled at two resolutions gives the same function
    k = 4
    w = rng.normal(size=(1, 1, k, 2))
    coef = rng.normal(size=k) + 1j * rng.normal(size=k)
    coef[0] = coef[0].real

    def signal(n):
        x = np.arange(n) / n
        return np.real(sum(coef[j] * np.exp(2j * np.pi * j * x) * (1 if j == 0 else 2) for j in range(k)))

    a = D.spectral_conv(D.Tensor(signal(32)[None, None]), w, (k,)).data[0, 0]
    b = D.spectral_conv(D.Tensor(signal(64)[None, None]), w, (k,)).data[0, 0]
    np.testing.assert_allclose(a, b[::2], atol=1e-10)


def test_transform_constant_signal():
    c = D.spectral_transform(np.full(8, 2.5)).coeffs
    assert c[0] == pytest.approx(20.0)
    np.testing.assert_allclose(c[1:], 0, atol=1e-12)


def test_transform_pure_cosine():
    n, k = 16, 3
    c = D.spectral_transform(np.cos(2 * np.pi * k * np.arange(n) / n)).coeffs
    nz = np.flatnonzero(np.abs(c) > 1e-9)
    assert list(nz) == [k]


def test_transform_matches_naive_dft(rng):
    x = rng.normal(size=16)
    j = np.arange(16)
    naive = np.array([np.sum(x * np.exp(-2j * np.pi * k * j / 16)) for k in range(9)])
    np.testing.assert_allclose(D.spectral_transform(x).coeffs, naive, atol=1e-10)


@pytest.mark.parametrize("shape", [(16,), (64,), (128,), (32, 32)])
def test_transform_round_trip_and_parseval(shape, rng):
    x = rng.normal(size=(3,) + shape)
    sc = D.spectral_transform(x, dims=len(shape))
    back = D.spectral_transform(sc, "inverse", dims=len(shape))
    assert np.max(np.abs(back - x)) < 1e-10
    # Parseval with the rfft half layout: double every non-self-conjugate column
    n = shape[-1]
    wts = np.full(n // 2 + 1, 2.0)
    wts[0] = 1.0
    if n % 2 == 0:
        wts[-1] = 1.0
    energy = np.sum(np.abs(sc.coeffs) ** 2 * wts, axis=tuple(range(1, len(shape) + 1))) / np.prod(shape)
    np.testing.assert_allclose(energy, np.sum(x ** 2, axis=tuple(range(1, len(shape) + 1))), rtol=1e-10)


def test_transform_errors():
    with pytest.raises(D.ShapeError):
        D.spectral_transform(np.ones(1))
    sc = D.spectral_transform(np.ones(16))
    with pytest.raises(D.ShapeError):
        D.spectral_transform(sc.coeffs, "inverse", grid_shape=(32,))
    with pytest.raises(D.ShapeError):
        D.spectral_transform(sc.coeffs, "inverse")


@given(seed=st.integers(0, 10 ** 6), a=st.floats(-5, 5))
def test_vjp_linear_in_cotangent(seed, a):
    r = np.random.default_rng(seed)
    g = D.Graph(lambda x: D.tanh(x) * D.exp(x))
    x, v = r.normal(size=5), r.normal(size=5)
    g1 = D.vjp(g, {"x": x}, a * v)["x"]
    g2 = D.vjp(g, {"x": x}, v)["x"]
    np.testing.assert_allclose(g1, a * g2, atol=1e-12)


def test_forward_is_pure(rng):
    w = rng.normal(size=(1, 2, 4, 2))
    g = D.Graph(lambda x: D.gelu(D.spectral_conv(x, D.Tensor(w), (4,))))
    x = rng.normal(size=(2, 1, 16))
    a, b = D.forward(g, {"x": x})["out"], D.forward(g, {"x": x})["out"]
    assert np.array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_reported_with_node():
    g = D.Graph(lambda x: D.log(x))
    with pytest.raises(D.NonFiniteError) as err:
        D.forward(g, {"x": np.array([-1.0])})
    assert err.value.node == 1 and err.value.op == "log"


def test_shape_errors():
    g = D.Graph(lambda x, y: x + y, inputs=("x", "y"))
    with pytest.raises(D.ShapeError):
        D.forward(g, {"x": np.ones(2)})
    with pytest.raises((D.ShapeError, ValueError)):
        D.forward(g, {"x": np.ones(2), "y": np.ones(3)})
    with pytest.raises(D.ShapeError):
        D.vjp(D.Graph(lambda x: x * 2), {"x": np.ones(3)}, np.ones(4))


def test_floor_is_not_differentiable():
    g = D.Graph(lambda x: D.floor(x) * 2.0)
    with pytest.raises(D.NonDifferentiableError):
        D.vjp(g, {"x": np.array([1.5])}, np.array([1.0]))


def test_stop_gradient_blocks():
    g = D.Graph(lambda x: x * D.stop_gradient(x))
    np.testing.assert_allclose(D.vjp(g, {"x": np.array([3.0])}, np.ones(1))["x"], [3.0])
