from __future__ import annotations

import numpy as np
import pytest

from asge.errors import ConfigurationError
from asge.tensor import ConvParams, conv2d_forward, conv2d_weight_grad, global_avg_pool, relu


def _params(gen: np.random.Generator, c_out: int, c_in: int, k: int = 3, *, padding: int = 1, dtype=np.float64) -> ConvParams:
    return ConvParams(
        gen.standard_normal((c_out, c_in, k, k)).astype(dtype),
        gen.standard_normal(c_out).astype(dtype),
        stride=1,
        padding=padding,
    )


def _naive_conv(x: np.ndarray, p: ConvParams) -> np.ndarray:
    b, c_in, h, w = x.shape
    k, pad, s = p.kernel, p.padding, p.stride
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h, out_w = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
    out = np.zeros((b, p.out_channels, out_h, out_w))
    for n in range(b):
        for o in range(p.out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    acc = p.bias[o]
                    for c in range(c_in):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[n, c, i * s + ky, j * s + kx] * p.weights[o, c, ky, kx]
                    out[n, o, i, j] = acc
    return out


def test_conv_zero_input_zero_bias_gives_zeros() -> None:
    gen = np.random.default_rng(0)
    p = ConvParams(gen.standard_normal((1, 1, 3, 3)), np.zeros(1))
    assert np.all(conv2d_forward(np.zeros((1, 1, 3, 3)), p) == 0.0)


def test_conv_scalar_case() -> None:
    p = ConvParams(np.array([[[[2.5]]]]), np.array([0.5]), padding=0)
    out = conv2d_forward(np.array([[[[3.0]]]]), p)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(3.0 * 2.5 + 0.5)


def test_conv_matches_naive_loops() -> None:
    gen = np.random.default_rng(1)
    x = gen.standard_normal((2, 3, 8, 8))
    p = _params(gen, 4, 3)
    got = conv2d_forward(x, p)
    want = _naive_conv(x, p)
    assert got.shape == (2, 4, 8, 8)
    assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12)) <= 1e-6


def test_conv_output_extent_without_padding() -> None:
    gen = np.random.default_rng(2)
    p = _params(gen, 2, 1, padding=0)
    assert conv2d_forward(gen.standard_normal((1, 1, 7, 5)), p).shape == (1, 2, 5, 3)


def test_conv_is_linear_in_input_and_weights() -> None:
    gen = np.random.default_rng(3)
    x, y = gen.standard_normal((2, 2, 3, 6, 6))
    p = _params(gen, 4, 3)
    p.bias[:] = 0.0
    a, b = 0.7, -1.3
    lhs = a * conv2d_forward(x, p) + b * conv2d_forward(y, p)
    assert np.allclose(conv2d_forward(a * x + b * y, p), lhs, atol=1e-5)

    q = _params(gen, 4, 3)
    q.bias[:] = 0.0
    mixed = ConvParams(a * p.weights + b * q.weights, np.zeros(4))
    assert np.allclose(conv2d_forward(x, mixed), a * conv2d_forward(x, p) + b * conv2d_forward(x, q), atol=1e-5)


def test_conv_rejects_channel_mismatch() -> None:
    gen = np.random.default_rng(4)
    with pytest.raises(ConfigurationError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), _params(gen, 1, 3))


def test_conv_params_reject_even_kernel() -> None:
    with pytest.raises(ConfigurationError):
        ConvParams(np.zeros((1, 1, 2, 2)), np.zeros(1))


def test_weight_grad_zero_upstream_is_zero() -> None:
    gen = np.random.default_rng(5)
    x = gen.standard_normal((2, 3, 5, 5))
    p = _params(gen, 4, 3)
    dw, db = conv2d_weight_grad(x, np.zeros((2, 4, 5, 5)), p)
    assert not dw.any() and not db.any()


def test_weight_grad_scalar_case() -> None:
    p = ConvParams(np.array([[[[1.0]]]]), np.array([0.0]), padding=0)
    dw, db = conv2d_weight_grad(np.array([[[[3.0]]]]), np.array([[[[2.0]]]]), p)
    assert dw[0, 0, 0, 0] == pytest.approx(6.0)
    assert db[0] == pytest.approx(2.0)


def test_weight_grad_matches_finite_differences() -> None:
    gen = np.random.default_rng(6)
    x = gen.standard_normal((2, 4, 8, 8))
    p = _params(gen, 4, 4)
    upstream = gen.standard_normal((2, 4, 8, 8))
    dw, db = conv2d_weight_grad(x, upstream, p)
    h = 1e-6

    def objective() -> float:
        return float(np.sum(upstream * conv2d_forward(x, p)))

    for name, analytic in (("weights", dw), ("bias", db)):
        array = p.arrays()[name]
        for index in np.ndindex(array.shape):
            orig = array[index]
            array[index] = orig + h
            plus = objective()
            array[index] = orig - h
            minus = objective()
            array[index] = orig
            numeric = (plus - minus) / (2 * h)
            assert abs(analytic[index] - numeric) / max(abs(numeric), 1e-8) <= 1e-5


def test_weight_grad_rejects_wrong_upstream_shape() -> None:
    gen = np.random.default_rng(7)
    p = _params(gen, 2, 1)
    with pytest.raises(ConfigurationError):
        conv2d_weight_grad(np.zeros((1, 1, 4, 4)), np.zeros((1, 2, 3, 3)), p)


def test_relu_sign_cases() -> None:
    out, mask = relu(np.array([-1.0, 0.0, 2.0]))
    assert out.tolist() == [0.0, 0.0, 2.0]
    assert mask.tolist() == [0.0, 0.0, 1.0]


def test_relu_identity_region_and_idempotence() -> None:
    gen = np.random.default_rng(8)
    pos = gen.uniform(0.1, 1.0, size=(3, 4))
    out, mask = relu(pos)
    assert np.array_equal(out, pos)
    assert np.all(mask == 1.0)

    x = gen.standard_normal((4, 5))
    once, m = relu(x)
    assert np.array_equal(relu(once)[0], once)
    assert np.array_equal(m * x, once)


def test_global_avg_pool() -> None:
    assert np.allclose(global_avg_pool(np.full((2, 3, 4, 4), 1.5)), 1.5)
    x = np.random.default_rng(9).standard_normal((2, 3, 1, 1))
    assert np.array_equal(global_avg_pool(x), x[:, :, 0, 0])

    y = np.random.default_rng(10).standard_normal((2, 3, 4, 4))
    want = np.zeros((2, 3))
    for b in range(2):
        for c in range(3):
            want[b, c] = sum(y[b, c, i, j] for i in range(4) for j in range(4)) / 16
    assert np.allclose(global_avg_pool(y), want, atol=1e-6)
