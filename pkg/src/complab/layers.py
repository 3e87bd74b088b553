"""Dense NHWC layer operations with hand-written gradients.

Tensors are plain ``numpy.ndarray`` objects. Activations are laid out as
``(batch, height, width, channels)`` and convolution kernels as
``(kh, kw, in_channels, out_channels)``. Every forward op here has a matching
backward op whose output can be checked against central finite differences
with :func:`complab.gradcheck.grad_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PADDING_MODES = ("same", "valid", "same_floor")


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_params: list[np.ndarray] = field(default_factory=list)


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def create(cls, channels: int, dtype=np.float32, epsilon: float = 1e-5, momentum: float = 0.9):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    """Spatial output extent of a convolution along one axis.

    ``same`` gives ``ceil(n / stride)``, ``valid`` gives
    ``floor((n - k) / stride) + 1`` and ``same_floor`` gives
    ``floor(n / stride)``; the last one keeps strided convolutions in step
    with 2x2 max pooling on odd extents (7 -> 3).
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        return (n - k) // stride + 1 if n >= k else 0
    if padding == "same_floor":
        return n // stride
    raise ValueError(f"unknown padding {padding!r}; expected one of {PADDING_MODES}")


def _pad_amounts(n: int, k: int, stride: int, padding: str) -> tuple[int, int]:
    out = conv_output_size(n, k, stride, padding)
    if padding == "valid":
        return 0, 0
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _conv_geometry(x_shape, k_shape, stride, padding):
    if len(x_shape) != 4 or len(k_shape) != 4:
        raise ShapeError("conv2d expects a 4-d NHWC input and a 4-d kernel")
    n, h, w, c = x_shape
    kh, kw, kc, _ = k_shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"convolution of {h}x{w} with {kh}x{kw}/{stride} ({padding}) is empty")
    return ho, wo, _pad_amounts(h, kh, stride, padding), _pad_amounts(w, kw, stride, padding)


def _im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _columns(x, k_shape, stride, padding):
    ho, wo, (pt, pb), (pl, pr) = _conv_geometry(x.shape, k_shape, stride, padding)
    kh, kw = k_shape[:2]
    if kh == kw == 1 and stride == 1 and not (pt or pb or pl or pr):
        return x.reshape(-1, x.shape[-1]), ho, wo
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x
    return _im2col(xp, kh, kw, stride, ho, wo), ho, wo


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "same",
                   return_columns: bool = False):
    """2-d cross-correlation of an NHWC batch with a ``(kh, kw, cin, cout)`` kernel.

    With ``return_columns`` the im2col matrix is returned too, so that
    :func:`conv2d_backward` can reuse it.
    """
    kh, kw, c, cout = kernel.shape
    cols, ho, wo = _columns(x, kernel.shape, stride, padding)
    out = (cols @ kernel.reshape(kh * kw * c, cout)).reshape(x.shape[0], ho, wo, cout)
    return (out, cols) if return_columns else out


def conv2d_backward(x, kernel, stride, padding, d_output, columns=None) -> LayerGrad:
    """Gradients of :func:`conv2d_forward` w.r.t. input and kernel."""
    ho, wo, (pt, pb), (pl, pr) = _conv_geometry(x.shape, kernel.shape, stride, padding)
    n, h, w, c = x.shape
    kh, kw, _, cout = kernel.shape
    if d_output.shape != (n, ho, wo, cout):
        raise ShapeError(f"d_output has shape {d_output.shape}, expected {(n, ho, wo, cout)}")
    cols = columns if columns is not None else _columns(x, kernel.shape, stride, padding)[0]
    dy = d_output.reshape(n * ho * wo, cout)
    d_kernel = (cols.T @ dy).reshape(kernel.shape)
    dcols = dy @ kernel.reshape(kh * kw * c, cout).T
    if kh == kw == 1 and stride == 1 and not (pt or pb or pl or pr):
        return LayerGrad(d_input=dcols.reshape(x.shape), d_params=[d_kernel])
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    d_input = dxp[:, pt:pt + h, pl:pl + w, :]
    return LayerGrad(d_input=d_input, d_params=[d_kernel])


def conv2d_separable(x: np.ndarray, col_kernel: np.ndarray, row_kernel: np.ndarray, stride: int = 1,
                     padding: str = "same") -> np.ndarray:
    """Two 1-d passes: a ``1 x n`` horizontal kernel then an ``n x 1`` vertical one.

    Matches a full ``n x n`` convolution only when that kernel is rank one,
    ``k[a, b, ci, co] = row_kernel[a, 0, ci, co] * col_kernel[0, b, ci, co]``.
    Channels are handled depthwise-then-summed, so the factorisation is exact
    per ``(ci, co)`` pair.
    """
    if stride != 1:
        raise ShapeError("separable convolution is only equivalent at stride 1")
    if col_kernel.ndim != 4 or row_kernel.ndim != 4:
        raise ShapeError("separable kernels must be 4-d")
    if col_kernel.shape[0] != 1 or row_kernel.shape[1] != 1:
        raise ShapeError("col_kernel must be 1 x n and row_kernel n x 1")
    nk = col_kernel.shape[1]
    if row_kernel.shape[0] != nk or col_kernel.shape[2:] != row_kernel.shape[2:]:
        raise ShapeError(f"kernel extents differ: {col_kernel.shape} vs {row_kernel.shape}")
    cin, cout = col_kernel.shape[2:]
    if x.shape[-1] != cin:
        raise ShapeError(f"kernel expects {cin} input channels, input has {x.shape[-1]}")
    n, h, w, _ = x.shape
    ho, wo, (pt, pb), (pl, pr) = _conv_geometry(x.shape, (nk, nk, cin, cout), 1, padding)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    # horizontal pass keeps (ci, co) separate: (n, hp, wo, ci, co)
    horiz = np.zeros((n, xp.shape[1], wo, cin, cout), dtype=np.result_type(x, col_kernel))
    for b in range(nk):
        horiz += xp[:, :, b:b + wo, :, None] * col_kernel[0, b]
    out = np.zeros((n, ho, wo, cout), dtype=horiz.dtype)
    for a in range(nk):
        out += np.einsum("nhwio,io->nhwo", horiz[:, a:a + ho], row_kernel[a, 0])
    return out


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

@dataclass
class PoolIndices:
    """Argmax bookkeeping from :func:`maxpool2d`.

    ``argmax`` holds the row-major position (0..3) of the winner inside each
    2x2 window.
    """

    argmax: np.ndarray
    input_shape: tuple


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2) -> tuple[np.ndarray, PoolIndices]:
    """2x2/2 max pooling with floor semantics on odd extents.

    Ties resolve to the first element in row-major scan order.
    """
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    n, h, w, c = x.shape
    if h < window or w < window:
        raise ShapeError(f"input {h}x{w} smaller than pooling window")
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, PoolIndices(argmax=idx, input_shape=x.shape)


def maxpool2d_backward(indices: PoolIndices, d_output: np.ndarray) -> np.ndarray:
    n, h, w, c = indices.input_shape
    ho, wo = h // 2, w // 2
    if d_output.shape != (n, ho, wo, c):
        raise ShapeError(f"d_output has shape {d_output.shape}, expected {(n, ho, wo, c)}")
    onehot = (indices.argmax[..., None] == np.arange(4)) * d_output[..., None]
    blocks = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    d_input = np.zeros(indices.input_shape, dtype=d_output.dtype)
    d_input[:, :2 * ho, :2 * wo, :] = blocks
    return d_input


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(input_shape, d_output: np.ndarray) -> np.ndarray:
    _, h, w, _ = input_shape
    return np.broadcast_to(d_output / (h * w), input_shape).copy()


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train") -> tuple[np.ndarray, BatchNormCache]:
    """Per-channel batch normalisation over every axis but the last.

    In ``train`` mode the running statistics in ``state`` are updated in place
    as ``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased batch estimate. Reductions accumulate in
    float64, elementwise work stays in the input dtype.
    """
    dt = x.dtype
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        m = x2.shape[0]
        mean = x2.sum(axis=0, dtype=np.float64) / m
        xc = x2 - mean.astype(dt)
        var = np.maximum((xc * xc).sum(axis=0, dtype=np.float64) / m, 0.0)
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1 - mom) * var * m / max(m - 1, 1)
    elif mode == "eval":
        xc = x2 - state.running_mean.astype(dt)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(dt)
    x_hat = xc * inv_std
    out = x_hat * state.gamma.astype(dt) + state.beta.astype(dt)
    return out.reshape(x.shape), BatchNormCache(x_hat=x_hat.reshape(x.shape), inv_std=inv_std, mode=mode)


def batchnorm_backward(cache: BatchNormCache, state: BatchNormState, d_output: np.ndarray) -> LayerGrad:
    """Returns ``d_input`` and ``[d_gamma, d_beta]``."""
    dt = d_output.dtype
    c = d_output.shape[-1]
    dy = d_output.reshape(-1, c)
    x_hat = cache.x_hat.reshape(-1, c)
    d_beta = dy.sum(axis=0, dtype=np.float64)
    d_gamma = (dy * x_hat).sum(axis=0, dtype=np.float64)
    g = (state.gamma * cache.inv_std).astype(dt)
    if cache.mode == "eval":
        d_input = dy * g
    else:
        m = dy.shape[0]
        d_input = (dy - (d_beta / m).astype(dt) - x_hat * (d_gamma / m).astype(dt)) * g
    return LayerGrad(d_input=d_input.reshape(d_output.shape), d_params=[d_gamma.astype(dt), d_beta.astype(dt)])


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, d_output: np.ndarray) -> np.ndarray:
    return d_output * (x > 0)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "train"):
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries
    the ``1 / (1 - rate)`` scale so backward is ``d_output * mask``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return x * mask, mask


def dropout_backward(mask, d_output: np.ndarray) -> np.ndarray:
    return d_output if mask is None else d_output * mask


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    Returns the loss and its gradient w.r.t. ``logits``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = float(-logp[np.arange(n), labels].mean())
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def he_normal(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal init with std ``sqrt(2 / fan_in)``; fan_in = kh*kw*cin."""
    fan_in = math.prod(shape[:-1])
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
