"""Convolution and transposed convolution as explicit matrices.

Tensors are plain ``float64`` numpy arrays in C order. A single-image
convolution input has shape ``(channels, height, width)``; every direct
routine also accepts a leading batch axis.

Convolution here is cross-correlation (no kernel flip). Kernels have shape
``(output_channels, input_channels, kernel_height, kernel_width)`` and
always describe the *forward* (down-sampling) convolution; the transposed
convolution reuses the same kernel and geometry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not agree with a geometry."""


class ConvergenceError(RuntimeError):
    """Power iteration ran out of iterations.

    The last singular value estimate and right singular vector are kept on
    the exception so callers can decide whether to use them anyway.
    """

    def __init__(self, message, estimate, vector):
        super().__init__(message)
        self.estimate = estimate
        self.vector = vector


@dataclass(frozen=True)
class ConvGeometry:
    input_height: int
    input_width: int
    input_channels: int
    output_channels: int
    kernel_height: int
    kernel_width: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("input_height", "input_width", "input_channels",
                     "output_channels", "kernel_height", "kernel_width"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.output_height < 1 or self.output_width < 1:
            raise ShapeError(f"geometry produces an empty output: {self}")

    @property
    def output_height(self) -> int:
        return (self.input_height + 2 * self.padding - self.kernel_height) // self.stride + 1

    @property
    def output_width(self) -> int:
        return (self.input_width + 2 * self.padding - self.kernel_width) // self.stride + 1

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_channels, self.input_height, self.input_width)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.output_channels, self.output_height, self.output_width)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.output_channels, self.input_channels,
                self.kernel_height, self.kernel_width)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_size(self) -> int:
        return int(np.prod(self.output_shape))


def _check_kernel(kernel, geom):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != geom.kernel_shape:
        raise ShapeError(f"kernel shape {kernel.shape} does not match geometry {geom.kernel_shape}")
    return kernel


def _check_batch(x, shape, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == shape:
        return x[None], True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise ShapeError(f"{what} shape {x.shape} does not match expected {shape}")


def _windows(xp, geom):
    """View of shape (B, C, oh, ow, kh, kw) with every receptive field of padded ``xp``."""
    v = np.lib.stride_tricks.sliding_window_view(
        xp, (geom.kernel_height, geom.kernel_width), axis=(2, 3))
    s = geom.stride
    return v[:, :, ::s, ::s][:, :, :geom.output_height, :geom.output_width]


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def build_conv_operator(kernel, geom: ConvGeometry) -> np.ndarray:
    """Dense matrix ``op`` with ``op @ x.ravel() == conv2d_direct(x).ravel()``.

    Rows are ordered (output channel, row, column) and columns (input channel,
    row, column). Every nonzero entry is a copy of one kernel weight; taps
    that fall into the zero padding are simply dropped.
    """
    kernel = _check_kernel(kernel, geom)
    op = np.zeros((geom.output_size, geom.input_size))
    co, ci, ki, kj, oh, ow = np.meshgrid(
        np.arange(geom.output_channels), np.arange(geom.input_channels),
        np.arange(geom.kernel_height), np.arange(geom.kernel_width),
        np.arange(geom.output_height), np.arange(geom.output_width),
        indexing="ij")
    ih = oh * geom.stride - geom.padding + ki
    iw = ow * geom.stride - geom.padding + kj
    inside = (ih >= 0) & (ih < geom.input_height) & (iw >= 0) & (iw < geom.input_width)
    rows = (co * geom.output_height + oh) * geom.output_width + ow
    cols = (ci * geom.input_height + ih) * geom.input_width + iw
    # (row, col) pairs are unique per tap, so plain assignment is exact
    op[rows[inside], cols[inside]] = kernel[co[inside], ci[inside], ki[inside], kj[inside]]
    return op


def build_transposed_conv_operator(kernel, geom: ConvGeometry) -> np.ndarray:
    """Matrix of the transposed convolution: the transpose of the forward operator."""
    return np.ascontiguousarray(build_conv_operator(kernel, geom).T)


def conv2d_direct(x, kernel, geom: ConvGeometry) -> np.ndarray:
    """Sliding-window cross-correlation summed over input channels."""
    kernel = _check_kernel(kernel, geom)
    xb, single = _check_batch(x, geom.input_shape, "conv input")
    win = _windows(_pad(xb, geom.padding), geom)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (B, oh, ow, Co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out[0] if single else out


def tconv2d_direct(y, kernel, geom: ConvGeometry) -> np.ndarray:
    """Transposed convolution by scatter-add; maps output-shaped ``y`` back to input shape.

    Input positions never touched by a window (when the stride does not tile
    the padded input exactly) stay zero.
    """
    kernel = _check_kernel(kernel, geom)
    yb, single = _check_batch(y, geom.output_shape, "transposed conv input")
    p, s = geom.padding, geom.stride
    oh, ow = geom.output_height, geom.output_width
    cols = np.tensordot(yb, kernel, axes=([1], [0]))  # (B, oh, ow, Ci, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((yb.shape[0], geom.input_channels,
                   geom.input_height + 2 * p, geom.input_width + 2 * p))
    for ki in range(geom.kernel_height):
        for kj in range(geom.kernel_width):
            xp[:, :, ki:ki + s * (oh - 1) + 1:s, kj:kj + s * (ow - 1) + 1:s] += cols[:, :, ki, kj]
    out = np.ascontiguousarray(xp[:, :, p:p + geom.input_height, p:p + geom.input_width])
    return out[0] if single else out


def conv2d_kernel_grad(x, grad_out, geom: ConvGeometry) -> np.ndarray:
    """Gradient of ``sum(grad_out * conv2d_direct(x, k))`` with respect to ``k``.

    Batched inputs are summed over the batch axis.
    """
    xb, _ = _check_batch(x, geom.input_shape, "conv input")
    gb, _ = _check_batch(grad_out, geom.output_shape, "conv output gradient")
    if xb.shape[0] != gb.shape[0]:
        raise ShapeError(f"batch sizes differ: {xb.shape[0]} vs {gb.shape[0]}")
    win = _windows(_pad(xb, geom.padding), geom)
    return np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3]))


def frobenius_norm(op) -> float:
    op = np.asarray(op, dtype=np.float64)
    return float(np.sqrt(np.sum(op * op)))


def spectral_norm(op, tol=1e-10, max_iter=10_000, seed=0) -> float:
    """Largest singular value by power iteration on ``op.T @ op``.

    Starts from a fixed Gaussian vector drawn with ``seed``. Stops when the
    relative change of the estimate drops below ``tol``; raises
    :class:`ConvergenceError` after ``max_iter`` iterations.
    """
    op = np.asarray(op, dtype=np.float64)
    if op.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {op.shape}")
    if not np.all(np.isfinite(op)):
        raise ValueError("operator has non-finite entries")
    v = np.random.default_rng(seed).standard_normal(op.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = op @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            return 0.0
        w = op.T @ u
        v = w / np.linalg.norm(w)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            # one extra product so the returned value uses the refined vector
            return max(new_sigma, float(np.linalg.norm(op @ v)))
        sigma = new_sigma
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last estimate {sigma!r})", sigma, v)


def matrix_norm(op, kind="spectral", **kwargs) -> float:
    if kind == "frobenius":
        return frobenius_norm(op)
    if kind == "spectral":
        return spectral_norm(op, **kwargs)
    raise ValueError(f"unknown norm kind {kind!r}")
