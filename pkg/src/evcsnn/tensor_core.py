"""Dense array kernels used by the convolutional spiking network.

Tensors are plain ``numpy.ndarray`` objects in float64. Every kernel accepts
either a single sample (``[C, H, W]`` / ``[D]``) or a stack of samples with one
extra leading axis (``[N, C, H, W]`` / ``[N, D]``); the network uses the
stacked form to push all time steps of one sample through a layer at once.

Convolution is valid (no padding), stride 1, and written as a
cross-correlation: ``y[o, i, j] = b[o] + sum_{c,m,n} x[c, i+m, j+n] k[o, c, m, n]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not agree with a kernel's contract."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 5
    kernel_w: int = 5
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"ConvSpec extents must be positive: {self}")
        if self.stride != 1 or self.padding != 0:
            raise ValueError("only stride 1 and padding 0 are supported")

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kernel_h > h or self.kernel_w > w:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} larger than input {h}x{w}"
            )
        return h - self.kernel_h + 1, w - self.kernel_w + 1


def _as_stack(x: np.ndarray, ndim: int, name: str) -> tuple[np.ndarray, bool]:
    """Add a leading sample axis if ``x`` is a single sample."""
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"{name} must have {ndim} or {ndim + 1} dims, got shape {x.shape}")


def _check_conv_args(x: np.ndarray, k: np.ndarray, spec: ConvSpec | None) -> None:
    if k.ndim != 4:
        raise ShapeError(f"kernel must be [C_out, C_in, kh, kw], got {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if spec is not None and tuple(k.shape) != spec.kernel_shape:
        raise ShapeError(f"kernel shape {k.shape} does not match {spec.kernel_shape}")
    if k.shape[2] > x.shape[2] or k.shape[3] > x.shape[3]:
        raise ShapeError(f"kernel {k.shape[2:]} larger than input {x.shape[2:]}")


def conv2d_forward(
    x: np.ndarray, k: np.ndarray, bias: np.ndarray, spec: ConvSpec | None = None
) -> np.ndarray:
    """Valid 2-D cross-correlation.

    Args:
        x: Input, ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        k: Kernel, ``[C_out, C_in, kh, kw]``.
        bias: ``[C_out]``.
        spec: Optional spec the kernel shape is checked against.

    Returns:
        ``[C_out, H-kh+1, W-kw+1]`` (with a leading ``N`` if given one).
    """
    xs, single = _as_stack(np.asarray(x, dtype=np.float64), 3, "x")
    _check_conv_args(xs, k, spec)
    if bias.shape != (k.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({k.shape[0]},)")
    c_out, _, kh, kw = k.shape
    ho, wo = xs.shape[2] - kh + 1, xs.shape[3] - kw + 1
    # One matmul per kernel offset keeps memory at the size of the output
    # instead of materialising every receptive field.
    acc = np.zeros((c_out, xs.shape[0], ho, wo))
    for m in range(kh):
        for n in range(kw):
            acc += np.tensordot(k[:, :, m, n], xs[:, :, m : m + ho, n : n + wo], axes=(1, 1))
    acc += bias[:, None, None, None]
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    return y[0] if single else y


def conv2d_backward(
    grad_y: np.ndarray,
    x: np.ndarray,
    k: np.ndarray,
    spec: ConvSpec | None = None,
    input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` with respect to input, kernel and bias.

    Kernel and bias gradients are summed over the leading sample axis when a
    stack is given. ``input_grad=False`` skips the input gradient and returns
    ``None`` in its place.
    """
    xs, single = _as_stack(np.asarray(x, dtype=np.float64), 3, "x")
    gy, gy_single = _as_stack(np.asarray(grad_y, dtype=np.float64), 3, "grad_y")
    if single != gy_single:
        raise ShapeError("grad_y and x must both be stacked or both be single samples")
    _check_conv_args(xs, k, spec)
    c_out, c_in, kh, kw = k.shape
    ho, wo = xs.shape[2] - kh + 1, xs.shape[3] - kw + 1
    expected = (xs.shape[0], c_out, ho, wo)
    if gy.shape != expected:
        raise ShapeError(f"grad_y shape {gy.shape} != forward output shape {expected}")

    grad_k = np.empty_like(k, dtype=np.float64)
    grad_b = gy.sum(axis=(0, 2, 3))
    gx = np.zeros((c_in, xs.shape[0]) + xs.shape[2:]) if input_grad else None
    for m in range(kh):
        for n in range(kw):
            window = xs[:, :, m : m + ho, n : n + wo]
            grad_k[:, :, m, n] = np.tensordot(gy, window, axes=([0, 2, 3], [0, 2, 3]))
            if gx is not None:
                gx[:, :, m : m + ho, n : n + wo] += np.tensordot(k[:, :, m, n], gy, axes=(0, 1))
    if gx is None:
        return None, grad_k, grad_b
    grad_x = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
    return (grad_x[0] if single else grad_x), grad_k, grad_b


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pool with stride 2.

    A trailing odd row or column is dropped. The returned argmax holds, per
    output cell, the flat index ``row * W + col`` of the winning input cell
    within its ``H x W`` plane; ties go to the first cell in row-major order.
    """
    xs, single = _as_stack(np.asarray(x, dtype=np.float64), 3, "x")
    n, c, h, w = xs.shape
    if h < 2 or w < 2:
        raise ShapeError(f"max pool needs H, W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    blocks = xs[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    local = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + local // 2
    cols = 2 * np.arange(wo)[None, :] + local % 2
    argmax = rows * w + cols
    if single:
        return y[0], argmax[0]
    return y, argmax


def maxpool2d_backward(
    grad_y: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    """Route each pooled gradient back to the input cell that won its window."""
    gy = np.asarray(grad_y, dtype=np.float64)
    if gy.shape != argmax.shape:
        raise ShapeError(f"grad_y shape {gy.shape} != argmax shape {argmax.shape}")
    input_shape = tuple(input_shape)
    if len(input_shape) != gy.ndim or input_shape[:-2] != gy.shape[:-2]:
        raise ShapeError(f"input shape {input_shape} incompatible with grad_y {gy.shape}")
    h, w = input_shape[-2:]
    if (h // 2, w // 2) != gy.shape[-2:]:
        raise ShapeError(f"input {h}x{w} does not pool to {gy.shape[-2:]}")
    lead = gy.shape[:-2]
    grad_x = np.zeros(lead + (h * w,))
    # windows are disjoint, so a plain scatter never collides
    np.put_along_axis(
        grad_x,
        argmax.reshape(lead + (-1,)),
        gy.reshape(lead + (-1,)),
        axis=-1,
    )
    return grad_x.reshape(input_shape)


def linear_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``y = w @ x + bias`` for ``x`` of shape ``[D]`` or ``[N, D]``."""
    xs = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or xs.shape[-1] != w.shape[1] or xs.ndim not in (1, 2):
        raise ShapeError(f"cannot apply weight {w.shape} to input {xs.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({w.shape[0]},)")
    return xs @ w.T + bias


def linear_backward(
    grad_y: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.asarray(x, dtype=np.float64)
    gy = np.asarray(grad_y, dtype=np.float64)
    if gy.shape != xs.shape[:-1] + (w.shape[0],) or xs.shape[-1] != w.shape[1]:
        raise ShapeError(f"grad_y {gy.shape}, x {xs.shape}, w {w.shape} disagree")
    grad_x = gy @ w
    if xs.ndim == 1:
        grad_w = np.outer(gy, xs)
        grad_b = gy.copy()
    else:
        grad_w = gy.T @ xs
        grad_b = gy.sum(axis=0)
    return grad_x, grad_w, grad_b


def flatten(x: np.ndarray) -> np.ndarray:
    """Row-major flatten of ``[C, H, W]`` (or ``[N, C, H, W]`` to ``[N, C*H*W]``)."""
    if x.ndim == 3:
        return x.reshape(-1)
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"flatten expects 3 or 4 dims, got {x.shape}")


def unflatten(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`flatten`; also used to reshape gradients."""
    if v.ndim == 1:
        return v.reshape(shape)
    return v.reshape((v.shape[0],) + tuple(shape))
