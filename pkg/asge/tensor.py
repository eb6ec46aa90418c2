"""Dense tensor substrate: convolution, its weight gradient, ReLU and GAP.

Tensors are row-major ``numpy.ndarray`` values. Only the pieces the layer-local
gradient chain needs exist here; there is deliberately no input gradient for
the convolution because nothing ever propagates across a layer boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided
from numpy.typing import NDArray

from .errors import ConfigurationError

Tensor = NDArray[np.floating]

PRECISIONS: dict[str, type[np.floating]] = {"float32": np.float32, "float64": np.float64}


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ConfigurationError(f"unknown precision {precision!r}", field="training.precision") from None


@dataclass
class ConvParams:
    """Weights ``[C_out, C_in, K, K]`` and bias ``[C_out]`` of one convolution.

    The arrays are owned by the layer that holds this object; optimizers update
    them in place.
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1

    def __post_init__(self) -> None:
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ConfigurationError(f"conv weights must be [C_out, C_in, K, K], got {self.weights.shape}")
        if self.weights.shape[2] % 2 != 1:
            raise ConfigurationError(f"kernel size must be odd, got {self.weights.shape[2]}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError(f"bias shape {self.bias.shape} does not match C_out={self.weights.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid stride/padding ({self.stride}, {self.padding})")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ConfigurationError("conv parameters contain non-finite values")

    @property
    def kernel(self) -> int:
        return int(self.weights.shape[2])

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.weights.shape[1])

    def arrays(self) -> dict[str, Tensor]:
        return {"weights": self.weights, "bias": self.bias}

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k = self.kernel
        if h + 2 * self.padding < k or w + 2 * self.padding < k:
            raise ConfigurationError(f"input {h}x{w} is smaller than kernel {k} with padding {self.padding}")
        return (h + 2 * self.padding - k) // self.stride + 1, (w + 2 * self.padding - k) // self.stride + 1


def _check_input(x: Tensor, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"conv input must be [B, C, H, W], got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ConfigurationError(f"conv input has {x.shape[1]} channels, weights expect {params.in_channels}")


def _windows(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Read-only view ``[B, C, H', W', K, K]`` of every receptive field."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    out_h = (h - kernel) // stride + 1
    out_w = (w - kernel) // stride + 1
    sb, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(b, c, out_h, out_w, kernel, kernel),
        strides=(sb, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def conv2d_forward(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation plus per-channel bias (no kernel flip)."""
    _check_input(x, params)
    params.output_hw(x.shape[2], x.shape[3])
    win = _windows(x, params.kernel, params.stride, params.padding)
    out = np.tensordot(win, params.weights, axes=([1, 4, 5], [1, 2, 3]))  # [B, H', W', C_out]
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_weight_grad(x: Tensor, upstream: Tensor, params: ConvParams) -> tuple[Tensor, Tensor]:
    """Gradients of ``sum(upstream * conv2d_forward(x))`` w.r.t. weights and bias.

    Summed over the batch; the loss is responsible for any 1/B factor.
    """
    _check_input(x, params)
    out_h, out_w = params.output_hw(x.shape[2], x.shape[3])
    expected = (x.shape[0], params.out_channels, out_h, out_w)
    if upstream.shape != expected:
        raise ConfigurationError(f"upstream shape {upstream.shape} does not match conv output {expected}")
    win = _windows(x, params.kernel, params.stride, params.padding)
    d_weights = np.tensordot(upstream, win, axes=([0, 2, 3], [0, 2, 3]))  # [C_out, C_in, K, K]
    d_bias = upstream.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(d_weights), d_bias


def relu(x: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(max(0, x), mask)``; the mask is the Jacobian, 0 at exactly 0."""
    mask = (x > 0).astype(x.dtype)
    return np.maximum(x, 0).astype(x.dtype, copy=False), mask


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    return x.mean(axis=(2, 3))
