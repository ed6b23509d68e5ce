"""Deterministic CPU kernels (forward + backward) and an SGD optimizer.

All tensors are float64 numpy arrays in (batch, channels, height, width)
layout.  Every forward kernel can record the intermediates its backward
needs into a cache dict; backward functions consume that cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def as_tensor4(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 4:
        raise ShapeError(f"{name}: expected 4 dims (b,c,h,w), got {a.shape}")
    return a


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, hout, wout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * hout : stride,
                                  j : j + stride * wout : stride]
    return cols, hout, wout


def conv2d_forward(x, weight, bias=None, stride: int = 1, pad: int = 0,
                   cache: dict | None = None, node: str = "conv"):
    """Standard 2d cross-correlation with zero padding.

    weight: (out_ch, in_ch, kh, kw); bias: (out_ch,) or None.
    """
    x = as_tensor4(x, node)
    weight = np.asarray(weight, dtype=np.float64)
    out_ch, in_ch, kh, kw = weight.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"{node}: input has {x.shape[1]} channels, "
                         f"weight expects {in_ch}")
    cols, hout, wout = _im2col(x, kh, kw, stride, pad)
    out = np.tensordot(weight, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    if cache is not None:
        cache.update(cols=cols, x_shape=x.shape, weight=weight,
                     stride=stride, pad=pad, has_bias=bias is not None)
    return out


def conv2d_backward(dout, cache):
    """Returns (dx, dweight, dbias)."""
    cols = cache["cols"]
    weight = cache["weight"]
    stride, pad = cache["stride"], cache["pad"]
    b, c, h, w = cache["x_shape"]
    out_ch, in_ch, kh, kw = weight.shape
    hout, wout = dout.shape[2], dout.shape[3]

    dweight = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))
    dbias = dout.sum(axis=(0, 2, 3)) if cache["has_bias"] else None

    # (b, hout, wout, out_ch) @ (out_ch, c*kh*kw) -> scatter back
    dcols = np.tensordot(dout, weight, axes=([1], [0]))  # b,hout,wout,c,kh,kw
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * hout : stride,
                j : j + stride * wout : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : pad + h, pad : pad + w]
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=BN_EPS,
                      mode: str = "inference", momentum: float = BN_MOMENTUM,
                      cache: dict | None = None, node: str = "bn"):
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics and updates the running
    buffers in place by exponential moving average.  Inference mode uses
    the stored running statistics.
    """
    x = as_tensor4(x, node)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if eps <= 0:
        raise ConfigError(f"{node}: eps must be positive, got {eps}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"{node}: gamma/beta length must equal {ch} channels")

    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "inference":
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    else:
        raise ConfigError(f"{node}: unknown mode {mode!r}")

    std = np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    out = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    if cache is not None:
        cache.update(xhat=xhat, std=std, gamma=gamma, mode=mode,
                     n=x.shape[0] * x.shape[2] * x.shape[3])
    return out


def batchnorm_backward(dout, cache):
    """Returns (dx, dgamma, dbeta)."""
    xhat, std, gamma = cache["xhat"], cache["std"], cache["gamma"]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, -1, 1, 1)
    inv_std = (1.0 / std).reshape(1, -1, 1, 1)
    if cache["mode"] == "train":
        n = cache["n"]
        s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        dx = inv_std / n * (n * dxhat - s1 - xhat * s2)
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise / pooling / shape ops


def silu_forward(x, cache: dict | None = None):
    x = as_tensor4(x, "silu")
    sig = _sigmoid(x)
    if cache is not None:
        cache.update(x=x, sig=sig)
    return x * sig


def silu_backward(dout, cache):
    x, sig = cache["x"], cache["sig"]
    return dout * (sig * (1.0 + x * (1.0 - sig)))


def relu_forward(x, cache: dict | None = None):
    x = as_tensor4(x, "relu")
    if cache is not None:
        cache.update(mask=x > 0)
    return np.maximum(x, 0.0)


def relu_backward(dout, cache):
    return dout * cache["mask"]


def maxpool2_forward(x, cache: dict | None = None, node: str = "maxpool2"):
    """2x2 stride-2 max pooling; requires even spatial dims."""
    x = as_tensor4(x, node)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"{node}: spatial dims must be even, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first max wins: deterministic
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if cache is not None:
        cache.update(arg=arg, x_shape=x.shape)
    return out


def maxpool2_backward(dout, cache):
    b, c, h, w = cache["x_shape"]
    arg = cache["arg"]
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(b, c, h, w)


def upsample2_forward(x, cache: dict | None = None):
    x = as_tensor4(x, "upsample")
    if cache is not None:
        cache.update(x_shape=x.shape)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dout, cache):
    b, c, h, w = cache["x_shape"]
    return dout.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


def concat_forward(inputs, cache: dict | None = None, node: str = "concat"):
    inputs = [as_tensor4(x, node) for x in inputs]
    ref = inputs[0]
    for x in inputs[1:]:
        if x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"{node}: inputs disagree on batch/spatial dims")
    if cache is not None:
        cache.update(widths=[x.shape[1] for x in inputs])
    return np.concatenate(inputs, axis=1)


def concat_backward(dout, cache):
    grads, off = [], 0
    for w in cache["widths"]:
        grads.append(dout[:, off : off + w])
        off += w
    return grads


def add_forward(inputs, cache: dict | None = None, node: str = "add"):
    inputs = [as_tensor4(x, node) for x in inputs]
    ref = inputs[0]
    for x in inputs[1:]:
        if x.shape != ref.shape:
            raise ShapeError(f"{node}: add inputs must share all dims")
    if cache is not None:
        cache.update(n=len(inputs))
    out = inputs[0].copy()
    for x in inputs[1:]:
        out += x
    return out


def add_backward(dout, cache):
    return [dout] * cache["n"]


# ---------------------------------------------------------------------------
# SGD with classic momentum


@dataclass
class OptState:
    """Per-parameter velocity buffers for momentum SGD."""

    learning_rate: float
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def step(self, key, param: np.ndarray, grad: np.ndarray) -> None:
        """v <- momentum*v + grad; param <- param - lr*v (in place)."""
        if param.shape != grad.shape:
            raise ShapeError(f"{key}: grad shape {grad.shape} != param {param.shape}")
        v = self.velocity.get(key)
        if v is None:
            v = np.zeros_like(param)
            self.velocity[key] = v
        v *= self.momentum
        v += grad
        param -= self.learning_rate * v
