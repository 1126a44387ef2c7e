"""Layer forward/backward passes over NHWC numpy arrays.

Gradients are hand-derived per layer (no autodiff graph). Each layer
caches whatever its backward pass needs during a training-mode forward
and clears the cache on inference-mode forward, so ``backward`` is only
callable right after a training forward.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import DEFAULT_DTYPE, Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # new_running = momentum * old + (1 - momentum) * batch


class Layer:
    """Common plumbing: parameter registry and cache discipline."""

    kind = "base"

    def __init__(self):
        self.cache = None
        self.grads = {}

    # layers with learnables override these
    def init_params(self, rng: Rng, dtype=DEFAULT_DTYPE) -> None:
        pass

    def param_items(self):
        """[(name, array)] of learnable parameters, updated in place."""
        return []

    def state_items(self):
        """[(name, array)] of everything persisted in a checkpoint."""
        return self.param_items()

    def load_state(self, items: dict) -> None:
        for name, arr in self.state_items():
            src = items[name]
            if src.shape != arr.shape:
                raise ShapeError(
                    f"{self.kind}.{name}: checkpoint shape {src.shape} "
                    f"!= model shape {arr.shape}"
                )
            arr[...] = src

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training: bool, rng: Rng | None = None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _take_cache(self):
        if self.cache is None:
            raise RuntimeError(
                f"{self.kind}.backward called without a preceding training forward"
            )
        cache = self.cache
        self.cache = None
        return cache


class Conv2d(Layer):
    """KxK cross-correlation, stride 1, zero 'same' padding, NHWC.

    Weights are [K, K, Cin, Cout]; the forward pass accumulates one
    (Cin -> Cout) matmul per kernel offset, which keeps memory flat and
    leaves BLAS to do the heavy lifting.
    """

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        if in_channels <= 0 or out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if kernel_size <= 0 or kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.weight = None
        self.bias = None

    def init_params(self, rng, dtype=DEFAULT_DTYPE):
        k = self.kernel_size
        fan_in = k * k * self.in_channels
        std = np.sqrt(2.0 / fan_in)
        self.weight = rng.normal(
            (k, k, self.in_channels, self.out_channels), 0.0, std
        ).astype(dtype)
        self.bias = np.zeros(self.out_channels, dtype=dtype)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got {c}"
            )
        return (h, w, self.out_channels)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(
                f"conv2d expects [N,H,W,{self.in_channels}], got {x.shape}"
            )

    def forward(self, x, training, rng=None):
        self._check_input(x)
        n, h, w, _ = x.shape
        k = self.kernel_size
        pad = k // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        out = np.tile(self.bias, (n, h, w, 1))
        for di in range(k):
            for dj in range(k):
                out += xp[:, di : di + h, dj : dj + w, :] @ self.weight[di, dj]
        self.cache = (xp, x.shape) if training else None
        return out

    def backward(self, grad_out):
        xp, x_shape = self._take_cache()
        n, h, w, _ = x_shape
        k = self.kernel_size
        pad = k // 2
        grad_w = np.empty_like(self.weight)
        grad_xp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, di : di + h, dj : dj + w, :]
                grad_w[di, dj] = np.tensordot(
                    patch, grad_out, axes=([0, 1, 2], [0, 1, 2])
                )
                grad_xp[:, di : di + h, dj : dj + w, :] += (
                    grad_out @ self.weight[di, dj].T
                )
        self.grads = {"weight": grad_w, "bias": grad_out.sum(axis=(0, 1, 2))}
        return grad_xp[:, pad : pad + h, pad : pad + w, :]


class BatchNorm2d(Layer):
    """Per-channel normalization over batch and spatial axes.

    Training mode normalizes with the biased batch statistics and folds
    them into running estimates; inference mode uses the running
    estimates only, so it is a pure function of (parameters, input).
    """

    kind = "batchnorm2d"

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        if channels <= 0:
            raise ValueError("channels must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = None
        self.beta = None
        self.running_mean = None
        self.running_var = None

    def init_params(self, rng, dtype=DEFAULT_DTYPE):
        c = self.channels
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def param_items(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_items(self):
        return self.param_items() + [
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError(
                f"batchnorm2d expects [N,H,W,{self.channels}], got {x.shape}"
            )

    def forward(self, x, training, rng=None):
        self._check_input(x)
        if training:
            m = x.shape[0] * x.shape[1] * x.shape[2]
            if m < 2:
                raise ShapeError(
                    f"batchnorm2d training needs >= 2 values per channel, got {m}"
                )
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            self.running_mean[...] = (
                self.momentum * self.running_mean + (1 - self.momentum) * mean
            )
            self.running_var[...] = (
                self.momentum * self.running_var + (1 - self.momentum) * var
            )
            self.cache = (x_hat, inv_std, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) * inv_std
            self.cache = None
        return self.gamma * x_hat + self.beta

    def backward(self, grad_out):
        x_hat, inv_std, m = self._take_cache()
        grad_gamma = (grad_out * x_hat).sum(axis=(0, 1, 2))
        grad_beta = grad_out.sum(axis=(0, 1, 2))
        g = grad_out * self.gamma
        grad_x = (
            inv_std / m
        ) * (m * g - g.sum(axis=(0, 1, 2)) - x_hat * (g * x_hat).sum(axis=(0, 1, 2)))
        self.grads = {"gamma": grad_gamma, "beta": grad_beta}
        return grad_x


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, rng=None):
        mask = x > 0  # subgradient 0 at x == 0
        self.cache = mask if training else None
        return x * mask

    def backward(self, grad_out):
        mask = self._take_cache()
        return grad_out * mask


class MaxPool2d(Layer):
    """2x2 window, stride 2; backward routes to the argmax.

    Ties go to the first occurrence in row-major window order, so the
    backward pass is deterministic.
    """

    kind = "maxpool2d"

    def out_shape(self, in_shape):
        h, w, c = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
        return (h // 2, w // 2, c)

    @staticmethod
    def _windows(x):
        n, h, w, c = x.shape
        xr = x.reshape(n, h // 2, 2, w // 2, 2, c)
        return xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)

    def forward(self, x, training, rng=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2d needs even spatial extents, got {h}x{w}")
        xr = self._windows(x)
        idx = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        self.cache = (idx, x.shape) if training else None
        return out

    def backward(self, grad_out):
        idx, x_shape = self._take_cache()
        n, h, w, c = x_shape
        grad_windows = np.zeros((n, h // 2, w // 2, c, 4), dtype=grad_out.dtype)
        np.put_along_axis(grad_windows, idx[..., None], grad_out[..., None], axis=-1)
        grad_x = grad_windows.reshape(n, h // 2, w // 2, c, 2, 2)
        grad_x = grad_x.transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return grad_x


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""

    kind = "dropout"

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, training, rng=None):
        if not training:
            self.cache = None
            return x
        if self.p == 0.0:
            mask = np.ones_like(x)
        else:
            if rng is None:
                raise ValueError("dropout in training mode needs an Rng")
            keep = (rng.uniform(x.shape) >= self.p).astype(x.dtype)
            mask = keep / (1.0 - self.p)
        self.cache = mask
        return x * mask

    def backward(self, grad_out):
        mask = self._take_cache()
        return grad_out * mask


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        n = 1
        for e in in_shape:
            n *= e
        return (n,)

    def forward(self, x, training, rng=None):
        self.cache = x.shape if training else None
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        x_shape = self._take_cache()
        return grad_out.reshape(x_shape)


class Dense(Layer):
    """Affine map x @ W + b on [N, D] inputs."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise ValueError("feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = None
        self.bias = None

    def init_params(self, rng, dtype=DEFAULT_DTYPE):
        std = np.sqrt(2.0 / self.in_features)
        self.weight = rng.normal(
            (self.in_features, self.out_features), 0.0, std
        ).astype(dtype)
        self.bias = np.zeros(self.out_features, dtype=dtype)

    def param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(
                f"dense expects flattened width {self.in_features}, got {in_shape}"
            )
        return (self.out_features,)

    def forward(self, x, training, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expects [N,{self.in_features}], got {x.shape}"
            )
        self.cache = x if training else None
        return x @ self.weight + self.bias

    def backward(self, grad_out):
        x = self._take_cache()
        self.grads = {"weight": x.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return grad_out @ self.weight.T
