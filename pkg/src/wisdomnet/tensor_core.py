"""Layer primitives with hand-written reverse-mode gradients.

Every operation works on plain numpy arrays laid out channels-last. Spatial
operations accept a single ``H x W x C`` image or a batch ``N x H x W x C`` and
return an array of the same rank. Outputs keep the dtype of their inputs, so
passing float64 arrays gives the 64-bit mode used for gradient checks, while
networks are built in float32 unless :func:`precision` says otherwise.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from wisdomnet.errors import DimensionError, NonFiniteError, NormalizationError

LOG_CLAMP = 1e-7
_ROW_SUM_TOL = 1e-4

_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """Dense array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = _check_finite(arr, "Tensor")
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def copy(self) -> "Tensor":
        out = Tensor(self.data, dtype=self.data.dtype)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


@dataclass(frozen=True)
class ConvParams:
    """Kernels ``k x k x C_in x n`` and one bias per filter."""

    kernels: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[0] != self.kernels.shape[1]:
            raise DimensionError(f"kernels must be k x k x C_in x C_out, got {self.kernels.shape}")
        k = self.kernels.shape[0]
        if k < 1 or k % 2 == 0:
            raise DimensionError(f"kernel size must be odd and >= 1, got {k}")
        if self.bias.shape != (self.kernels.shape[3],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.kernels.shape[3]} filters"
            )

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[2]

    @property
    def filters(self) -> int:
        return self.kernels.shape[3]


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} must be H x W x C or N x H x W x C, got shape {x.shape}")


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unfold same-padded ``k x k`` windows of a batch into rows.

    Returns an array of shape ``(N*H*W, k*k*C)`` whose columns are ordered
    ``(ky, kx, c)``, matching ``kernels.reshape(k*k*C, F)``.
    """
    n, h, w, c = x.shape
    pad = (k - 1) // 2
    if k == 1:
        return x.reshape(n * h * w, c)
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    # windows: (N, H, W, C, ky, kx) -> (N, H, W, ky, kx, C)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Scatter-add unfolded rows back onto an unpadded ``N x H x W x C`` grid."""
    n, h, w, c = shape
    if k == 1:
        return cols.reshape(n, h, w, c)
    pad = (k - 1) // 2
    blocks = cols.reshape(n, h, w, k, k, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, ky:ky + h, kx:kx + w, :] += blocks[:, :, :, ky, kx, :]
    return out[:, pad:pad + h, pad:pad + w, :]


def conv2d_forward(x: np.ndarray, params: ConvParams, cols: np.ndarray | None = None) -> np.ndarray:
    """Same-padded, stride-1 convolution (cross-correlation) plus bias.

    ``out[y, x, f] = bias[f] + sum_{ky,kx,c} kernels[ky,kx,c,f] * xpad[y+ky, x+kx, c]``
    where ``xpad`` is ``x`` zero-padded by ``(k-1)/2`` on every side.
    """
    xb, single = _as_batch(np.asarray(x), "conv2d input")
    if xb.shape[3] != params.in_channels:
        raise DimensionError(
            f"conv2d input has {xb.shape[3]} channels, kernels expect {params.in_channels}"
        )
    n, h, w, _ = xb.shape
    k = params.kernel_size
    if cols is None:
        cols = im2col(xb, k)
    out = cols @ params.kernels.reshape(-1, params.filters) + params.bias
    out = _check_finite(out.reshape(n, h, w, params.filters), "conv2d_forward")
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, params: ConvParams, upstream: np.ndarray,
                    cols: np.ndarray | None = None):
    """Return ``(grad_input, grad_kernels, grad_bias)`` for :func:`conv2d_forward`."""
    xb, single = _as_batch(np.asarray(x), "conv2d input")
    gb, _ = _as_batch(np.asarray(upstream), "conv2d upstream gradient")
    n, h, w, c = xb.shape
    expected = (n, h, w, params.filters)
    if gb.shape != expected:
        raise DimensionError(f"upstream gradient shape {gb.shape} != conv output shape {expected}")
    k = params.kernel_size
    if cols is None:
        cols = im2col(xb, k)
    g = gb.reshape(-1, params.filters)
    grad_kernels = (cols.T @ g).reshape(params.kernels.shape)
    grad_bias = g.sum(axis=0)
    grad_cols = g @ params.kernels.reshape(-1, params.filters).T
    grad_x = col2im(grad_cols, (n, h, w, c), k)
    return (grad_x[0] if single else grad_x), grad_kernels, grad_bias


@dataclass(frozen=True)
class PoolIndex:
    """Winning window offsets recorded by :func:`maxpool2d_forward`.

    ``indices`` holds, for every output cell, the row-major offset inside its
    ``k x k`` window of the element that was selected.
    """

    indices: np.ndarray
    input_shape: tuple[int, ...]
    k: int

    def positions(self) -> np.ndarray:
        """Absolute (y, x) input coordinates of each winner, shape ``(..., 2)``."""
        rows, cols = np.divmod(self.indices, self.k)
        ho, wo = self.indices.shape[-3], self.indices.shape[-2]
        ys = rows + (np.arange(ho) * self.k)[:, None, None]
        xs = cols + (np.arange(wo) * self.k)[None, :, None]
        return np.stack([ys, xs], axis=-1)


def maxpool2d_forward(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, PoolIndex]:
    """Non-overlapping max pooling (stride ``k``); odd extents are floored.

    Ties go to the first element of the window in row-major order.
    """
    xb, single = _as_batch(np.asarray(x), "maxpool input")
    n, h, w, c = xb.shape
    if h < k or w < k:
        raise DimensionError(f"maxpool input {h}x{w} is smaller than the {k}x{k} window")
    ho, wo = h // k, w // k
    blocks = (xb[:, :ho * k, :wo * k, :]
              .reshape(n, ho, k, wo, k, c)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, ho, wo, c, k * k))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    _check_finite(out, "maxpool2d_forward")
    if single:
        return out[0], PoolIndex(idx[0], tuple(x.shape), k)
    return out, PoolIndex(idx, tuple(x.shape), k)


def maxpool2d_backward(index: PoolIndex, upstream: np.ndarray) -> np.ndarray:
    """Route each upstream value to the input position that won its window."""
    upstream = np.asarray(upstream)
    if upstream.shape != index.indices.shape:
        raise DimensionError(
            f"upstream gradient shape {upstream.shape} != pooled shape {index.indices.shape}"
        )
    k = index.k
    single = len(index.input_shape) == 3
    idx = index.indices[None] if single else index.indices
    g = upstream[None] if single else upstream
    n, ho, wo, c = idx.shape
    h, w = index.input_shape[-3], index.input_shape[-2]
    blocks = np.zeros((n, ho, wo, c, k * k), dtype=g.dtype)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    grad = np.zeros((n, h, w, c), dtype=g.dtype)
    grad[:, :ho * k, :wo * k, :] = (blocks
                                    .reshape(n, ho, wo, c, k, k)
                                    .transpose(0, 1, 4, 2, 5, 3)
                                    .reshape(n, ho * k, wo * k, c))
    return grad[0] if single else grad


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if weights.ndim != 2 or bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense weights {weights.shape} / bias {bias.shape} are inconsistent")
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"dense input has {x.shape[-1]} features, weights expect {weights.shape[0]}")
    return _check_finite(x @ weights + bias, "dense_forward")


def dense_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`dense_forward`."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if upstream.shape != x.shape[:-1] + (weights.shape[1],):
        raise DimensionError(f"upstream gradient shape {upstream.shape} does not match dense output")
    xs = x.reshape(-1, weights.shape[0])
    gs = upstream.reshape(-1, weights.shape[1])
    grad_weights = xs.T @ gs
    grad_bias = gs.sum(axis=0)
    grad_x = upstream @ weights.T
    return grad_x, grad_weights, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(np.asarray(x) > 0, upstream, 0).astype(np.result_type(upstream), copy=False)


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row maximum."""
    z = np.asarray(z)
    _check_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``probs``."""
    return probs * (upstream - np.sum(upstream * probs, axis=-1, keepdims=True))


def binary_cross_entropy(labels, probs) -> float:
    """Mean BCE between 0/1 labels and predicted probabilities of label 1."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(probs, dtype=np.float64), LOG_CLAMP, 1 - LOG_CLAMP)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise DimensionError(f"labels {y.shape} and probabilities {p.shape} must be equal-length vectors")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _check_rows(one_hot: np.ndarray, predicted: np.ndarray) -> None:
    if predicted.ndim != 2 or predicted.shape[1] != 2 or one_hot.shape != predicted.shape:
        raise DimensionError(
            f"expected matching phi x 2 arrays, got labels {one_hot.shape} and predictions {predicted.shape}"
        )
    sums = predicted.sum(axis=1)
    if np.any(np.abs(sums - 1) > _ROW_SUM_TOL):
        bad = int(np.argmax(np.abs(sums - 1)))
        raise NormalizationError(f"prediction row {bad} sums to {sums[bad]!r}, not 1")


def cross_entropy_loss(one_hot, predicted) -> float:
    """BCE of a batch of two-class predictions.

    The label ``y`` of each row is its one-hot index and ``P(y)`` is the
    predicted probability of label 1 (column 1), clamped to
    ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    one_hot = np.asarray(one_hot)
    predicted = np.asarray(predicted)
    _check_rows(one_hot, predicted)
    return binary_cross_entropy(one_hot[:, 1], predicted[:, 1])


def cross_entropy_backward(one_hot, predicted) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` with respect to ``predicted``.

    Only column 1 enters the loss, so column 0 gets zero gradient; entries
    where the clamp is active also get zero.
    """
    one_hot = np.asarray(one_hot)
    predicted = np.asarray(predicted)
    _check_rows(one_hot, predicted)
    phi = predicted.shape[0]
    y = one_hot[:, 1]
    p_raw = predicted[:, 1]
    p = np.clip(p_raw, LOG_CLAMP, 1 - LOG_CLAMP)
    inside = (p_raw >= LOG_CLAMP) & (p_raw <= 1 - LOG_CLAMP)
    grad = np.zeros_like(predicted)
    grad[:, 1] = np.where(inside, -(y / p - (1 - y) / (1 - p)) / phi, 0)
    return grad


def softmax_cross_entropy_backward(one_hot, probs) -> np.ndarray:
    """Gradient of the loss with respect to the logits feeding the softmax.

    Equal to ``softmax_backward(probs, cross_entropy_backward(...))`` but
    evaluated in closed form, which avoids dividing by probabilities that are
    close to zero.
    """
    one_hot = np.asarray(one_hot)
    probs = np.asarray(probs)
    _check_rows(one_hot, probs)
    phi = probs.shape[0]
    p1 = probs[:, 1]
    inside = (p1 >= LOG_CLAMP) & (p1 <= 1 - LOG_CLAMP)
    d1 = np.where(inside, (p1 - one_hot[:, 1]) / phi, 0).astype(probs.dtype)
    # column 0 logit moves opposite to column 1 for a two-way softmax
    return np.stack([-d1, d1], axis=1)
