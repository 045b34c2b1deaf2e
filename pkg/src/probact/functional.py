"""Differentiable layer operations.

Each operation is a :class:`~probact.autodiff.Function` plus a thin wrapper
taking and returning :class:`~probact.autodiff.Variable` objects. Shape checks
live in the wrappers so that kernels can assume valid input.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax

from .autodiff import Function, Variable
from .errors import ShapeError, UsageError
from .tensor import NoiseKey, sample_uniform

LEAKY_SLOPE = 0.01
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


def _channel_shape(ndim: int) -> tuple[int, ...]:
    """Broadcast shape of a per-channel vector for rank-2 or rank-4 input."""
    return (1, -1) if ndim == 2 else (1, -1, 1, 1)


def _channel_axes(ndim: int) -> tuple[int, ...]:
    return (0,) if ndim == 2 else (0, 2, 3)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(saved, x):
        positive = x > 0
        saved["positive"] = positive
        return np.where(positive, x, x.dtype.type(0))

    @staticmethod
    def backward(saved, grad):
        # Subgradient at exactly zero is 0
        return (np.where(saved["positive"], grad, grad.dtype.type(0)),)


class LeakyReLU(Function):
    name = "leaky_relu"

    @staticmethod
    def forward(saved, x, slope=LEAKY_SLOPE):
        positive = x > 0
        saved["positive"], saved["slope"] = positive, slope
        return np.where(positive, x, x * x.dtype.type(slope))

    @staticmethod
    def backward(saved, grad):
        slope = grad.dtype.type(saved["slope"])
        return (np.where(saved["positive"], grad, grad * slope),)


class PReLU(Function):
    name = "prelu"

    @staticmethod
    def forward(saved, x, a):
        slope = a.reshape(_channel_shape(x.ndim))
        positive = x > 0
        saved.update(x=x, slope=slope, positive=positive, a_shape=a.shape)
        return np.where(positive, x, slope * x)

    @staticmethod
    def backward(saved, grad):
        x, positive = saved["x"], saved["positive"]
        grad_x = np.where(positive, grad, grad * saved["slope"])
        grad_a = np.where(positive, 0, grad * x).sum(axis=_channel_axes(x.ndim))
        return grad_x, grad_a.reshape(saved["a_shape"]).astype(grad.dtype)


class Swish(Function):
    name = "swish"

    @staticmethod
    def forward(saved, x):
        s = expit(x)
        saved["x"], saved["s"] = x, s
        return x * s

    @staticmethod
    def backward(saved, grad):
        x, s = saved["x"], saved["s"]
        return (grad * (s + x * s * (1 - s)),)


def relu(x: Variable) -> Variable:
    """max(0, x)."""
    return ReLU.apply(x)


def leaky_relu(x: Variable, slope: float = LEAKY_SLOPE) -> Variable:
    return LeakyReLU.apply(x, slope=slope)


def prelu(x: Variable, a: Variable) -> Variable:
    """x where positive, else a[c]·x with one slope per channel (axis 1)."""
    if x.value.ndim not in (2, 4):
        raise ShapeError(f"prelu needs rank-2 or rank-4 input, got rank {x.value.ndim}")
    if a.value.ndim != 1 or a.shape[0] != x.shape[1]:
        raise ShapeError(
            f"prelu slope shape {list(a.shape)} does not match {x.shape[1]} channels"
        )
    return PReLU.apply(x, a)


def swish(x: Variable) -> Variable:
    """x·sigmoid(x)."""
    return Swish.apply(x)


# ---------------------------------------------------------------------------
# Linear layers
# ---------------------------------------------------------------------------


class Dense(Function):
    name = "dense"

    @staticmethod
    def forward(saved, x, w, b):
        saved["x"], saved["w"] = x, w
        return x @ w + b

    @staticmethod
    def backward(saved, grad):
        x, w = saved["x"], saved["w"]
        return grad @ w.T, x.T @ grad, grad.sum(axis=0)


class Conv2d(Function):
    """3x3 style cross-correlation, stride 1, zero padding."""

    name = "conv2d"

    @staticmethod
    def forward(saved, x, w, b, padding=1):
        k = w.shape[2]
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        # (N, C, H', W', k, k) view, no copy
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        saved.update(windows=windows, w=w, padding=padding, x_shape=x.shape)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b.reshape(1, -1, 1, 1)

    @staticmethod
    def backward(saved, grad):
        windows, w, padding = saved["windows"], saved["w"], saved["padding"]
        n, c, h, width = saved["x_shape"]
        k = w.shape[2]
        out_h, out_w = grad.shape[2], grad.shape[3]

        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))

        grad_padded = np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contribution = np.tensordot(grad, w[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i : i + out_h, j : j + out_w] += contribution.transpose(
                    0, 3, 1, 2
                )
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + width]
        return np.ascontiguousarray(grad_x), grad_w.astype(grad.dtype), grad_b


class MaxPool2d(Function):
    """2x2 max pooling with stride 2."""

    name = "maxpool2d"

    @staticmethod
    def forward(saved, x):
        n, c, h, w = x.shape
        blocks = (
            x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, h // 2, w // 2, 4
            )
        )
        # argmax routes the gradient to the first maximum of each window
        winner = blocks.argmax(axis=-1)
        saved["winner"], saved["x_shape"] = winner, x.shape
        return np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(saved, grad):
        n, c, h, w = saved["x_shape"]
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, saved["winner"][..., None], grad[..., None], axis=-1)
        grad_x = (
            routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, h, w
            )
        )
        return (grad_x,)


def dense(x: Variable, w: Variable, b: Variable) -> Variable:
    """x·W + b with W of shape (in, out)."""
    if x.value.ndim != 2 or w.value.ndim != 2:
        raise ShapeError(
            f"dense needs rank-2 input and weights, got {list(x.shape)} and {list(w.shape)}"
        )
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input width {x.shape[1]} does not match weights {list(w.shape)}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {list(b.shape)} does not match {w.shape[1]} outputs")
    return Dense.apply(x, w, b)


def conv2d(x: Variable, w: Variable, b: Variable, padding: int = 1) -> Variable:
    """Cross-correlation of N×C×H×W input with O×C×k×k kernels."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(
            f"conv2d needs rank-4 input and kernels, got {list(x.shape)} and {list(w.shape)}"
        )
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d kernels expect {w.shape[1]} channels, input has {x.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernels must be square, got {list(w.shape[2:])}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {list(b.shape)} does not match {w.shape[0]} kernels")
    if min(x.shape[2:]) + 2 * padding < w.shape[2]:
        raise ShapeError(
            f"Input {list(x.shape[2:])} is smaller than the {w.shape[2]}x{w.shape[2]} kernel"
        )
    return Conv2d.apply(x, w, b, padding=padding)


def maxpool2d(x: Variable) -> Variable:
    if x.value.ndim != 4:
        raise ShapeError(f"maxpool2d needs rank-4 input, got rank {x.value.ndim}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"Spatial size {list(x.shape[2:])} not divisible by the pooling stride 2")
    return MaxPool2d.apply(x)


# ---------------------------------------------------------------------------
# Normalization and regularization
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean and variance of a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def zeros(cls, channels: int, dtype: np.dtype) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


class BatchNorm(Function):
    name = "batch_norm"

    @staticmethod
    def forward(saved, x, gamma, beta, running, training, momentum, eps):
        axes = _channel_axes(x.ndim)
        shape = _channel_shape(x.ndim)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // x.shape[1]
            running.mean = ((1 - momentum) * running.mean + momentum * mean).astype(x.dtype)
            unbiased = var * (count / (count - 1))
            running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(x.dtype)
        else:
            mean, var = running.mean, running.var
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        saved.update(
            x_hat=x_hat,
            inv_std=inv_std.reshape(shape),
            gamma=gamma.reshape(shape),
            training=training,
            axes=axes,
        )
        return (gamma.reshape(shape) * x_hat + beta.reshape(shape)).astype(x.dtype)

    @staticmethod
    def backward(saved, grad):
        x_hat, inv_std, gamma = saved["x_hat"], saved["inv_std"], saved["gamma"]
        axes = saved["axes"]
        grad_gamma = (grad * x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_x_hat = grad * gamma
        if not saved["training"]:
            return grad_x_hat * inv_std, grad_gamma, grad_beta
        count = grad.size // grad.shape[1]
        sum_g = grad_x_hat.sum(axis=axes, keepdims=True)
        sum_gx = (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
        grad_x = inv_std / count * (count * grad_x_hat - sum_g - x_hat * sum_gx)
        return grad_x.astype(grad.dtype), grad_gamma, grad_beta


class Dropout(Function):
    name = "dropout"

    @staticmethod
    def forward(saved, x, p, key):
        keep = sample_uniform(x.shape, key, dtype=np.float64).data >= p
        scale = x.dtype.type(1.0 / (1.0 - p))
        mask = keep.astype(x.dtype) * scale
        saved["mask"] = mask
        return x * mask

    @staticmethod
    def backward(saved, grad):
        return (grad * saved["mask"],)


class Flatten(Function):
    name = "flatten"

    @staticmethod
    def forward(saved, x):
        saved["shape"] = x.shape
        return x.reshape(x.shape[0], -1)

    @staticmethod
    def backward(saved, grad):
        return (grad.reshape(saved["shape"]),)


class SoftmaxCrossEntropy(Function):
    name = "softmax_cross_entropy"

    @staticmethod
    def forward(saved, logits, labels):
        log_probs = log_softmax(logits, axis=1)
        rows = np.arange(len(labels))
        saved["probs"], saved["labels"] = softmax(logits, axis=1), labels
        return np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    @staticmethod
    def backward(saved, grad):
        probs, labels = saved["probs"], saved["labels"]
        delta = probs.copy()
        delta[np.arange(len(labels)), labels] -= 1
        return ((delta * (grad / len(labels))).astype(probs.dtype),)


def batch_norm(
    x: Variable,
    gamma: Variable,
    beta: Variable,
    running: RunningStats,
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Variable:
    """Per-channel normalization (axis 1) by batch or running statistics.

    In training mode the running statistics are updated in place.

    Raises:
        UsageError: On a batch of one in training mode.
    """
    if x.value.ndim not in (2, 4):
        raise ShapeError(f"batch_norm needs rank-2 or rank-4 input, got rank {x.value.ndim}")
    channels = x.shape[1]
    for label, part in (("gamma", gamma.value), ("beta", beta.value)):
        if part.shape != (channels,):
            raise ShapeError(f"batch_norm {label} shape {list(part.shape)} != [{channels}]")
    if training and x.shape[0] < 2:
        raise UsageError("batch_norm needs a batch of at least 2 in training mode")
    return BatchNorm.apply(
        x, gamma, beta, running=running, training=training, momentum=momentum, eps=eps
    )


def dropout(x: Variable, p: float, training: bool, key: NoiseKey) -> Variable:
    """Inverted dropout: drop with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"Dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    return Dropout.apply(x, p=p, key=key)


def flatten(x: Variable) -> Variable:
    return Flatten.apply(x)


def softmax_cross_entropy(logits: Variable, labels: np.ndarray) -> Variable:
    """Mean softmax cross-entropy of N×K logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"Logits {list(logits.shape)} and labels {list(labels.shape)} do not line up"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"Labels must lie in [0, {logits.shape[1]})")
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
