"""Layers with explicit forward/backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .conv import (
    Pads,
    ShapeError,
    conv3d_backward,
    conv3d_forward,
    conv_padding,
    deconv3d_backward,
    deconv3d_forward,
    deconv_crop,
)

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "none")


@dataclass(frozen=True)
class ConvLayerSpec:
    """Static description of one (transposed) convolution layer.

    ``out_shape`` is the per-sample ``(D, H, W, C)`` the layer must produce;
    padding (or, for transposed layers, cropping) is derived from it.
    """

    name: str
    kernel: Tuple[int, int, int, int, int]  # (kd, kh, kw, in_ch, out_ch)
    stride: Tuple[int, int, int]
    in_shape: Tuple[int, int, int, int]
    out_shape: Tuple[int, int, int, int]
    activation: str = "leaky_relu"
    batchnorm: bool = False
    transposed: bool = False
    padding: Pads = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        kd, kh, kw, ci, co = self.kernel
        if self.in_shape[3] != ci or self.out_shape[3] != co:
            raise ShapeError(
                f"{self.name}: kernel channels {ci}->{co} do not match shapes "
                f"{self.in_shape} -> {self.out_shape}"
            )
        if self.padding is None:
            ks = (kd, kh, kw)
            if self.transposed:
                pads = tuple(
                    deconv_crop(self.in_shape[i], self.out_shape[i], ks[i], self.stride[i])
                    for i in range(3)
                )
            else:
                pads = tuple(
                    conv_padding(self.in_shape[i], self.out_shape[i], ks[i], self.stride[i])
                    for i in range(3)
                )
            object.__setattr__(self, "padding", pads)
        if any(p < 0 for pair in self.padding for p in pair):
            raise ShapeError(f"{self.name}: negative padding {self.padding}")

    @property
    def weight_shape(self):
        kd, kh, kw, ci, co = self.kernel
        # transposed kernels are stored in the layout of their adjoint convolution
        return (kd, kh, kw, co, ci) if self.transposed else (kd, kh, kw, ci, co)


class Layer:
    name = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def forward(self, x, training=True):
        raise NotImplementedError

    def backward(self, grad, need_input_grad=True):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _accumulate(self, key, g):
        if key in self.grads:
            self.grads[key] += g.astype(self.params[key].dtype, copy=False)
        else:
            self.grads[key] = g.astype(self.params[key].dtype, copy=True)

    def state(self) -> Dict[str, np.ndarray]:
        """Non-trainable arrays that must be checkpointed."""
        return {}

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.grads = {}
        return self


class Conv3D(Layer):
    def __init__(self, spec: ConvLayerSpec, rng: np.random.Generator, dtype=np.float32,
                 init_std=0.02):
        super().__init__()
        self.spec = spec
        self.name = spec.name
        self.params["weight"] = (rng.standard_normal(spec.weight_shape) * init_std).astype(dtype)
        self.params["bias"] = np.zeros(spec.kernel[4], dtype=dtype)
        self._x = None

    def _check(self, x):
        if x.shape[1:] != tuple(self.spec.in_shape):
            raise ShapeError(
                f"{self.name}: input shape {x.shape[1:]} != expected {tuple(self.spec.in_shape)}"
            )

    def forward(self, x, training=True):
        self._check(x)
        self._x = x
        s = self.spec
        w, b = self.params["weight"], self.params["bias"]
        if s.transposed:
            y = deconv3d_forward(x, w, b, s.stride, s.padding, s.out_shape[:3], name=self.name)
        else:
            y = conv3d_forward(x, w, b, s.stride, s.padding, name=self.name)
        if y.shape[1:] != tuple(s.out_shape):
            raise ShapeError(f"{self.name}: produced {y.shape[1:]}, expected {s.out_shape}")
        return y

    def backward(self, grad, need_input_grad=True):
        s = self.spec
        fn = deconv3d_backward if s.transposed else conv3d_backward
        gx, gw, gb = fn(self._x, self.params["weight"], grad, s.stride, s.padding,
                        need_input_grad=need_input_grad, name=self.name)
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx


class BatchNorm(Layer):
    """Per-channel batch normalisation over every axis but the last."""

    def __init__(self, channels: int, name="bn", momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training=True, update_stats=True):
        c = self.params["gamma"].shape[0]
        if x.shape[-1] != c:
            raise ShapeError(f"{self.name}: expected {c} channels, got {x.shape[-1]}")
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = np.square(x - mean.astype(x.dtype)).mean(axis=axes, dtype=np.float64)
            if update_stats:
                m = self.momentum
                self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(
                    self.running_mean.dtype)
                self.running_var = (m * self.running_var + (1 - m) * var).astype(
                    self.running_var.dtype)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv_std
        self._cache = (xhat, inv_std, training)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad, need_input_grad=True):
        xhat, inv_std, training = self._cache
        axes = tuple(range(grad.ndim - 1))
        gamma = self.params["gamma"]
        g_beta = grad.sum(axis=axes, dtype=np.float64)
        g_gamma = (grad * xhat).sum(axis=axes, dtype=np.float64)
        self._accumulate("gamma", g_gamma)
        self._accumulate("beta", g_beta)
        if not need_input_grad:
            return None
        if not training:
            return grad * (gamma * inv_std)
        m = grad.size // grad.shape[-1]
        scale = (gamma * inv_std / m).astype(grad.dtype)
        return scale * (m * grad - g_beta.astype(grad.dtype) - xhat * g_gamma.astype(grad.dtype))

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self


def activation_forward(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky_relu":
        # valid because the slope is below one
        return np.maximum(x, x * x.dtype.type(LEAKY_SLOPE))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, y: np.ndarray, grad: np.ndarray, kind: str) -> np.ndarray:
    """Backward pass given the forward input ``x`` and output ``y``."""
    if kind == "leaky_relu":
        return np.where(x >= 0, grad, grad * grad.dtype.type(LEAKY_SLOPE))
    if kind == "tanh":
        return grad * (1 - y * y)
    if kind == "sigmoid":
        return grad * y * (1 - y)
    if kind == "none":
        return grad
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Activation(Layer):
    def __init__(self, kind: str, name: Optional[str] = None):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.name = name or kind
        self._x = self._y = None

    def forward(self, x, training=True):
        self._x = x
        self._y = activation_forward(x, self.kind)
        return self._y

    def backward(self, grad, need_input_grad=True):
        return activation_backward(self._x, self._y, grad, self.kind)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return grad.reshape(self._shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name="dense",
                 dtype=np.float32, init_std=0.02):
        super().__init__()
        self.name = name
        self.params["weight"] = (rng.standard_normal((n_in, n_out)) * init_std).astype(dtype)
        self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self._x = None

    def forward(self, x, training=True):
        n_in = self.params["weight"].shape[0]
        if x.ndim != 2 or x.shape[1] != n_in:
            raise ShapeError(f"{self.name}: expected (N, {n_in}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad, need_input_grad=True):
        self._accumulate("weight", self._x.T @ grad)
        self._accumulate("bias", grad.sum(axis=0))
        return grad @ self.params["weight"].T if need_input_grad else None


class Sequential(Layer):
    """Ordered layer stack; parameter names are ``"<layer>/<param>"``."""

    def __init__(self, layers: List[Layer], name="seq"):
        super().__init__()
        self.layers = layers
        self.name = name
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {name}: {names}")

    def forward(self, x, training=True, update_stats=True):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                x = layer.forward(x, training=training, update_stats=update_stats)
            else:
                x = layer.forward(x, training=training)
        return x

    def backward(self, grad, need_input_grad=True):
        last = len(self.layers) - 1
        # find the first layer whose input gradient is actually required
        first_param = next(
            (i for i, l in enumerate(self.layers) if l.params), 0
        )
        for i in range(last, -1, -1):
            needed = need_input_grad or i > first_param
            grad = self.layers[i].backward(grad, need_input_grad=needed)
            if grad is None:
                break
        return grad if need_input_grad else None

    def named_params(self) -> Dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.params.items()}

    def named_grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for l in self.layers:
            for k, v in l.params.items():
                out[f"{l.name}/{k}"] = l.grads.get(k, np.zeros_like(v))
        return out

    def named_state(self) -> Dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.state().items()}

    def set_param(self, key: str, value: np.ndarray):
        lname, pname = key.split("/", 1)
        layer = self._layer(lname)
        if pname in layer.params:
            layer.params[pname][...] = value
        elif pname in layer.state():
            setattr(layer, pname, value.astype(layer.state()[pname].dtype))
        else:
            raise KeyError(key)

    def _layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def astype(self, dtype):
        for l in self.layers:
            l.astype(dtype)
        return self
