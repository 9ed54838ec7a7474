import numpy as np
import pytest
from hypothesis import given, strategies as st

from ofm import diff as D
from ofm.fno import (FNOConfig, OperatorParams, grid_coordinates, init_params, operator_forward,
                     param_shapes, spectral_conv, time_features)
from conftest import central_diff, rel_err

TINY = FNOConfig(dims=1, modes=(4,), width=4, n_layers=2, time_embed=2, proj_width=6)


def band_limited(n, k, seed, batch=2):
    r = np.random.default_rng(seed)
    x = np.arange(n) / n
    out = np.zeros((batch, 1, n))
    for j in range(1, k):
        a, b = r.normal(size=(2, batch, 1, 1)) / j
        out += a * np.cos(2 * np.pi * j * x) + b * np.sin(2 * np.pi * j * x)
    return out


def test_init_is_deterministic():
    a = init_params(TINY, np.random.default_rng(3))
    b = init_params(TINY, np.random.default_rng(3))
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)


def test_zero_init_gives_zero_field(rng):
    p = init_params(TINY, rng, zero=True)
    out = operator_forward(p, 0.3, rng.normal(size=(3, 1, 16))).data
    assert np.all(out == 0)


def test_zero_projection_gives_zero_field(rng):
    p = init_params(TINY, rng)
    p.tensors["proj2.w"][:] = 0
    p.tensors["proj2.b"][:] = 0
    assert np.all(operator_forward(p, 0.7, rng.normal(size=(2, 1, 16))).data == 0)


def test_param_count_formula():
    cfg = FNOConfig(dims=1, modes=(16,), width=32, n_layers=4)
    w, e, p, c = 32, cfg.time_embed, cfg.proj_width, 1
    lift = w * (c + 2) + w
    layer = w * w * 16 * 2 + w * w + w + w * e
    proj = p * w + p + c * p + c
    assert init_params(cfg, np.random.default_rng(0)).count() == lift + 4 * layer + proj


def test_spectral_weight_scale(rng):
    p = init_params(TINY, rng)
    spec = p.tensors["layer0.spec"]
    assert spec.min() >= 0 and spec.max() < 1 / TINY.width ** 2


def test_identity_spectral_weights_low_pass(rng):
    n, k = 32, 5
    w = np.zeros((1, 1, k, 2))
    w[..., 0] = 1.0
    x = rng.normal(size=(1, 1, n))
    c = np.fft.rfft(x, axis=-1)
    c[..., k:] = 0
    out = spectral_conv(D.Tensor(x), w, (k,)).data
    np.testing.assert_allclose(out, np.fft.irfft(c, n=n, axis=-1), atol=1e-12)


def test_spectral_conv_two_resolutions(rng):
    k = 6
    w = rng.normal(size=(1, 2, k, 2))
    w[..., 0, 1] = 0
    lo = spectral_conv(D.Tensor(band_limited(64, 4, 1)), w, (k,)).data
    hi = spectral_conv(D.Tensor(band_limited(128, 4, 1)), w, (k,)).data
    assert np.max(np.abs(hi[..., ::2] - lo)) < 1e-6


def test_modes_exceed_grid():
    w = np.zeros((1, 1, 10, 2))
    with pytest.raises(D.ShapeError):
        spectral_conv(D.Tensor(np.zeros((1, 1, 16))), w, (10,))
    with pytest.raises(D.ShapeError):
        operator_forward(init_params(FNOConfig(modes=(12,), width=2), np.random.default_rng(0)), 0.0,
                         np.zeros((1, 1, 16)))


@pytest.mark.parametrize("shape", [(64,), (128,)])
def test_output_shape_1d(shape, rng):
    p = init_params(FNOConfig(modes=(8,), width=8), rng)
    u = rng.normal(size=(2, 1) + shape)
    assert operator_forward(p, 0.5, u).shape == u.shape


def test_output_shape_2d(rng):
    p = init_params(FNOConfig(dims=2, modes=(4, 4), width=4, proj_width=8), rng)
    u = rng.normal(size=(2, 1, 32, 32))
    assert operator_forward(p, np.array([0.1, 0.9]), u).shape == u.shape


def test_discretization_convergence(rng):
    p = init_params(FNOConfig(modes=(8,), width=16), rng)
    lo = operator_forward(p, 0.4, band_limited(64, 4, 2)).data
    hi = operator_forward(p, 0.4, band_limited(128, 4, 2)).data
    assert np.sqrt(np.mean((hi[..., ::2] - lo) ** 2)) < 1e-3


def test_channel_and_time_errors(rng):
    p = init_params(TINY, rng)
    with pytest.raises(D.ShapeError):
        operator_forward(p, 0.5, np.zeros((1, 2, 16)))
    with pytest.raises(ValueError):
        operator_forward(p, 1.5, np.zeros((1, 1, 16)))
    with pytest.raises(ValueError):
        OperatorParams(TINY, {})


@given(seed=st.integers(0, 10 ** 6))
def test_gradient_wrt_input_fd(seed):
    r = np.random.default_rng(seed)
    p = init_params(TINY, r)
    u = r.normal(size=(2, 1, 16))
    v = r.normal(size=u.shape)
    tape = D.Tape()
    x = tape.variable(u)
    (g,) = tape.gradients([operator_forward(p, 0.3, x)], [v], [x])
    fd = central_diff(lambda z: np.sum(v * operator_forward(p, 0.3, z).data), u, h=1e-6)
    assert rel_err(g, fd) < 1e-4


def test_gradient_wrt_params_fd(rng):
    p = init_params(TINY, rng)
    u = rng.normal(size=(3, 1, 16))
    target = rng.normal(size=u.shape)

    def loss_of(tensors):
        out = operator_forward(tensors, np.array([0.1, 0.5, 0.9]), u, TINY)
        return D.mean(D.square(out - target))

    tape = D.Tape()
    tracked = {k: tape.variable(v, k) for k, v in p.tensors.items()}
    names = sorted(tracked)
    grads = dict(zip(names, tape.gradients([loss_of(tracked)], [1.0], [tracked[k] for k in names])))
    for name in ["lift.w", "layer0.spec", "layer1.temb", "layer1.b", "proj1.w", "proj2.b"]:
        def f(val, name=name):
            ts = dict(p.tensors)
            ts[name] = val
            return float(loss_of(ts).data)
        assert rel_err(grads[name], central_diff(f, p.tensors[name], h=1e-6)) < 1e-4, name


def test_reordered_points_sort_back(rng):
    # points carry their coordinates; permuting and sorting back is exact
    p = init_params(TINY, rng)
    u = rng.normal(size=(1, 1, 16))
    perm = rng.permutation(16)
    coords = grid_coordinates((16,))[0][perm]
    order = np.argsort(coords)
    restored = u[..., perm][..., order]
    assert np.array_equal(operator_forward(p, 0.2, restored).data, operator_forward(p, 0.2, u).data)


def test_float32_params(rng):
    p = init_params(TINY, rng).astype(np.float32)
    out = operator_forward(p, 0.5, rng.normal(size=(1, 1, 16)).astype(np.float32))
    assert out.dtype == np.float32


def test_time_features_range():
    f = time_features(np.linspace(0, 1, 5), 8)
    assert f.shape == (5, 8) and np.all(np.abs(f) <= 1)


def test_param_shapes_follow_config():
    s = param_shapes(FNOConfig(dims=2, modes=(3, 4), width=5))
    assert s["layer0.spec"] == (5, 5, 6, 4, 2)
    assert s["lift.w"] == (5, 4)
