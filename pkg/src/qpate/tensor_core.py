"""Dense float64 layers with hand-written forward/backward passes, plus AdamW.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major, with
images laid out as ``(N, C, H, W)``. Every layer keeps the cache its
backward pass needs on the instance, so one model instance must not be
shared between threads; separate instances are independent.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAKY_SLOPE = 0.01


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------

def conv2d_forward(x, weight, bias):
    """Stride-1 cross-correlation with 'same' padding.

    ``weight`` has shape ``(C_out, C_in, k, k)`` with ``k`` in {1, 3}.
    Returns ``(out, cache)``.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ConfigurationError(f"conv2d input has {c} channels, weight expects {cw}")
    if kh != kw or kh not in (1, 3):
        raise ConfigurationError(f"unsupported kernel {kh}x{kw}")
    if bias.shape != (f,):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {f} filters")
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    out = cols @ weight.reshape(f, -1).T + bias
    out = out.reshape(n, h, w, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, weight)


def conv2d_backward(grad_out, cache):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    if cache is None:
        raise UsageError("conv2d_backward called before conv2d_forward")
    (n, c, h, w), cols, weight = cache
    f, _, k, _ = weight.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, f)
    grad_w = (g.T @ cols).reshape(weight.shape)
    grad_b = g.sum(axis=0)
    dcols = (g @ weight.reshape(f, -1)).reshape(n, h, w, c, k, k)
    if k == 1:
        grad_x = dcols[..., 0, 0].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(grad_x), grad_w, grad_b
    pad = k // 2
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # N, C, k, k, H, W
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
    return dxp[:, :, pad:-pad, pad:-pad].copy(), grad_w, grad_b


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation over (N, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place.
    Returns ``(out, cache)``; the cache is ``None`` in inference mode.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ConfigurationError(f"batchnorm over {gamma.shape[0]} channels got {x.shape}")
    shape = (1, -1, 1, 1)
    if not train:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        return (x - running_mean.reshape(shape)) * (gamma * inv_std).reshape(shape) \
            + beta.reshape(shape), None
    if x.shape[0] < 2:
        raise ConfigurationError("batchnorm needs a batch of at least 2 in training mode")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = (centered ** 2).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(shape)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * count / (count - 1)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv_std, gamma)


def batchnorm_backward(grad_out, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise UsageError("batchnorm_backward needs a training-mode forward cache")
    xhat, inv_std, gamma = cache
    shape = (1, -1, 1, 1)
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma.reshape(shape)
    grad_x = (inv_std / m).reshape(shape) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return grad_x, grad_gamma, grad_beta


def leaky_relu(x, slope=0.0):
    """Elementwise ``max(x, slope * x)``; ``slope=0`` is plain ReLU."""
    if slope < 0:
        raise UsageError("slope must be nonnegative")
    return np.where(x > 0, x, slope * x)


def relu(x):
    return leaky_relu(x, 0.0)


def leaky_relu_grad(x, slope=0.0):
    """Derivative of :func:`leaky_relu`; uses the left branch at 0."""
    return np.where(x > 0, 1.0, slope)


def dense_forward(x, weight, bias):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (D, D')."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"dense layer expects (N, {weight.shape[0]}), got {x.shape}")
    return x @ weight + bias, (x, weight)


def dense_backward(grad_out, cache):
    if cache is None:
        raise UsageError("dense_backward called before dense_forward")
    x, weight = cache
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= m):
        raise UsageError(f"labels must lie in [0, {m})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigurationError("eps must be positive and weight_decay nonnegative")


def adamw_step(param, grad, m, v, config, step):
    """One AdamW update. Returns new ``(param, m, v)``; inputs are not modified.

    Weight decay is decoupled: it shrinks ``param`` directly by
    ``lr * weight_decay`` instead of entering the moment estimates.
    """
    if step < 1:
        raise UsageError("step counts start at 1")
    c = config
    m = c.beta1 * m + (1 - c.beta1) * grad
    v = c.beta2 * v + (1 - c.beta2) * grad * grad
    m_hat = m / (1 - c.beta1 ** step)
    v_hat = v / (1 - c.beta2 ** step)
    param = param * (1 - c.learning_rate * c.weight_decay)
    param = param - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)
    return param, m, v


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a list of arrays."""

    def __init__(self, params, config=None):
        self.params = list(params)
        self.config = config or AdamWConfig()
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        self.step_count += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            new_p, self.m[i], self.v[i] = adamw_step(
                p, g, self.m[i], self.v[i], self.config, self.step_count)
            p[...] = new_p  # in place so layers keep their references


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: ``params``/``grads`` are dicts of same-shaped arrays."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise UsageError(f"{type(self).__name__}.backward called without a forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel_size, rng):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ConfigurationError("only 1x1 and 3x3 kernels are supported")
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = he_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.params["bias"] = np.zeros(out_channels)

    def forward(self, x, train=True):
        out, cache = conv2d_forward(x, self.params["weight"], self.params["bias"])
        self._cache = cache if train else None
        return out

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._take_cache())
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class BatchNorm2d(Layer):
    def __init__(self, channels):
        super().__init__()
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=True):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"], train)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._take_cache())
        self.grads["gamma"], self.grads["beta"] = gg, gb
        return gx


class LeakyReLU(Layer):
    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        self._cache = x if train else None
        return leaky_relu(x, self.slope)

    def backward(self, grad):
        return grad * leaky_relu_grad(self._take_cache(), self.slope)


class ReLU(LeakyReLU):
    def __init__(self):
        super().__init__(0.0)


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling; H and W must be even."""

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        if train:
            self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (n, c, h, w), idx = self._take_cache()
        blocks = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(n, c, h, w)


class Flatten(Layer):
    def forward(self, x, train=True):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class Dense(Layer):
    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.params["weight"] = he_uniform(rng, (in_features, out_features), in_features)
        self.params["bias"] = np.zeros(out_features)

    def forward(self, x, train=True):
        out, cache = dense_forward(x, self.params["weight"], self.params["bias"])
        self._cache = cache if train else None
        return out

    def backward(self, grad):
        gx, gw, gb = dense_backward(grad, self._take_cache())
        self.grads["weight"], self.grads["bias"] = gw, gb
        return gx


class Sequential(Layer):
    """Runs layers in order; exposes their parameters under ``"<i>.<name>"`` keys."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_arrays(self, kind="params"):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, kind).items():
                out[f"{i}.{name}"] = arr
        return out

    def param_list(self):
        return [arr for layer in self.layers for arr in layer.params.values()]

    def grad_list(self):
        return [layer.grads[name] for layer in self.layers for name in layer.params]
