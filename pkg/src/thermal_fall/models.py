"""Thermal and flow 3D convolutional autoencoders and their discriminators."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .tensor import (
    Activation,
    BatchNorm,
    Conv3D,
    ConvLayerSpec,
    Dense,
    Flatten,
    Sequential,
    ShapeError,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)

THERMAL_LEN = 8
FLOW_LEN = 7
FRAME_SIZE = 64
ROLES = ("R_T", "R_F", "D_T", "D_F", "D_TF")
INITS = ("normal", "fan_in")


def _encoder_specs(depth: int) -> List[ConvLayerSpec]:
    k = (5, 3, 3)
    shapes = [
        (depth, 64, 64, 1),
        (depth, 64, 64, 16),
        (depth, 32, 32, 8),
        (4, 16, 16, 8),
        (2, 8, 8, 8),
    ]
    strides = [(1, 1, 1), (1, 2, 2), (2, 2, 2), (2, 2, 2)]
    return [
        ConvLayerSpec(
            name=f"enc{i + 1}",
            kernel=k + (shapes[i][3], shapes[i + 1][3]),
            stride=strides[i],
            in_shape=shapes[i],
            out_shape=shapes[i + 1],
        )
        for i in range(4)
    ]


def _decoder_specs(depth: int) -> List[ConvLayerSpec]:
    shapes = [
        (2, 8, 8, 8),
        (4, 16, 16, 8),
        (depth, 32, 32, 8),
        (depth, 64, 64, 16),
        (depth, 64, 64, 1),
    ]
    strides = [(2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)]
    kernels = [(5, 3, 3)] * 4
    if depth % 2 == 1:
        # odd temporal length is recovered by a 4-deep 2x2 kernel in the second layer
        kernels[1] = (4, 2, 2)
    return [
        ConvLayerSpec(
            name=f"dec{i + 1}",
            kernel=kernels[i] + (shapes[i][3], shapes[i + 1][3]),
            stride=strides[i],
            in_shape=shapes[i],
            out_shape=shapes[i + 1],
            activation="tanh" if i == 3 else "leaky_relu",
            transposed=True,
        )
        for i in range(4)
    ]


def init_std(spec: ConvLayerSpec, init: str = "normal") -> float:
    """Weight std: 0.02 for ``normal``, ``sqrt(2 / fan_in)`` for ``fan_in``.

    Fan-in counts the kernel taps times the layer's input channels.
    """
    if init == "normal":
        return 0.02
    if init == "fan_in":
        kd, kh, kw, c_in, _ = spec.kernel
        return float(np.sqrt(2.0 / (kd * kh * kw * c_in)))
    raise ValueError(f"unknown init {init!r}; choose from {INITS}")


def _stack(specs: Sequence[ConvLayerSpec], rng, dtype, batchnorm_from: int | None = None,
           init: str = "normal"):
    layers = []
    for i, spec in enumerate(specs):
        layers.append(Conv3D(spec, rng, dtype=dtype, init_std=init_std(spec, init)))
        if batchnorm_from is not None and i >= batchnorm_from:
            layers.append(BatchNorm(spec.out_shape[3], name=f"bn{i + 1}", dtype=dtype))
        layers.append(Activation(spec.activation, name=f"act{i + 1}"))
    return layers


class Autoencoder:
    """3DCAE: ``(N, T, 64, 64, 1)`` in, same shape out, output in [-1, 1]."""

    def __init__(self, role: str, depth: int, rng: np.random.Generator, dtype=np.float32,
                 init: str = "normal"):
        self.role = role
        self.depth = depth
        self.input_shape = (depth, FRAME_SIZE, FRAME_SIZE, 1)
        self.encoder_specs = _encoder_specs(depth)
        self.decoder_specs = _decoder_specs(depth)
        self.net = Sequential(
            _stack(self.encoder_specs + self.decoder_specs, rng, dtype, init=init), name=role
        )
        self.check_shapes()

    @property
    def specs(self):
        return self.encoder_specs + self.decoder_specs

    def check_shapes(self):
        shape = self.input_shape
        for spec in self.specs:
            if tuple(spec.in_shape) != shape:
                raise ShapeError(f"{self.role}/{spec.name}: input {spec.in_shape} != {shape}")
            shape = tuple(spec.out_shape)
        if shape != self.input_shape:
            raise ShapeError(f"{self.role}: output {shape} != input {self.input_shape}")

    def forward(self, x, training=True):
        return self.net.forward(x, training=training)

    __call__ = forward

    def backward(self, grad):
        self.net.backward(grad, need_input_grad=False)

    def params(self):
        return self.net.named_params()

    def grads(self):
        return self.net.named_grads()

    def zero_grad(self):
        self.net.zero_grad()

    def state(self):
        return self.net.named_state()

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def astype(self, dtype):
        self.net.astype(dtype)
        return self


class Discriminator:
    """One encoder per input channel, features concatenated into one sigmoid unit.

    With a single channel this is a plain 3DCNN discriminator; with the
    thermal and flow channels together it is the joint discriminator.
    """

    def __init__(self, role: str, depths: Sequence[int], rng: np.random.Generator,
                 dtype=np.float32):
        self.role = role
        self.depths = tuple(depths)
        self.encoders = []
        for ch, depth in enumerate(self.depths):
            specs = _encoder_specs(depth)
            layers = _stack(specs, rng, dtype, batchnorm_from=1) + [Flatten()]
            self.encoders.append(Sequential(layers, name=f"enc_{ch}"))
        self.feature_width = 2 * 8 * 8 * 8
        self.head = Dense(self.feature_width * len(self.depths), 1, rng, name="fusion",
                          dtype=dtype)
        self._p = None

    def forward(self, inputs: Sequence[np.ndarray], training=True, update_stats=True):
        if len(inputs) != len(self.depths):
            raise ShapeError(f"{self.role}: expected {len(self.depths)} inputs, got {len(inputs)}")
        feats = []
        for enc, depth, x in zip(self.encoders, self.depths, inputs):
            if x.shape[1:] != (depth, FRAME_SIZE, FRAME_SIZE, 1):
                raise ShapeError(
                    f"{self.role}: window of shape {x.shape[1:]} where depth {depth} is required"
                )
            feats.append(enc.forward(x, training=training, update_stats=update_stats))
        z = self.head.forward(np.concatenate(feats, axis=1), training=training)
        self._p = sigmoid(z)[:, 0]
        return self._p

    __call__ = forward

    def backward(self, grad_p: np.ndarray, need_input_grad=True):
        """Backward from d loss / d probability; returns per-channel input grads."""
        p = self._p
        gz = (grad_p * p * (1 - p))[:, None].astype(p.dtype)
        gfeat = self.head.backward(gz)
        grads = []
        for i, enc in enumerate(self.encoders):
            sl = gfeat[:, i * self.feature_width : (i + 1) * self.feature_width]
            grads.append(enc.backward(np.ascontiguousarray(sl), need_input_grad=need_input_grad))
        return grads

    def params(self):
        out = {}
        for enc in self.encoders:
            out.update({f"{enc.name}/{k}": v for k, v in enc.named_params().items()})
        out.update({f"fusion/{k}": v for k, v in self.head.params.items()})
        return out

    def grads(self):
        out = {}
        for enc in self.encoders:
            out.update({f"{enc.name}/{k}": v for k, v in enc.named_grads().items()})
        for k, v in self.head.params.items():
            out[f"fusion/{k}"] = self.head.grads.get(k, np.zeros_like(v))
        return out

    def state(self):
        out = {}
        for enc in self.encoders:
            out.update({f"{enc.name}/{k}": v for k, v in enc.named_state().items()})
        return out

    def zero_grad(self):
        for enc in self.encoders:
            enc.zero_grad()
        self.head.zero_grad()

    def astype(self, dtype):
        for enc in self.encoders:
            enc.astype(dtype)
        self.head.astype(dtype)
        return self

    def batchnorm_layers(self, channel=0):
        return [l for l in self.encoders[channel].layers if isinstance(l, BatchNorm)]

    def set_array(self, key: str, value: np.ndarray):
        top, rest = key.split("/", 1)
        if top == "fusion":
            self.head.params[rest][...] = value
            return
        for enc in self.encoders:
            if enc.name == top:
                enc.set_param(rest, value)
                return
        raise KeyError(key)


def build_thermal_3dcae(seed: int = 0, dtype=np.float32, init: str = "normal") -> Autoencoder:
    return Autoencoder("R_T", THERMAL_LEN, np.random.default_rng([seed, 1]), dtype, init)


def build_flow_3dcae(seed: int = 0, dtype=np.float32, init: str = "normal") -> Autoencoder:
    return Autoencoder("R_F", FLOW_LEN, np.random.default_rng([seed, 2]), dtype, init)


def build_discriminator(channel: str, seed: int = 0, dtype=np.float32) -> Discriminator:
    if channel == "thermal":
        return Discriminator("D_T", (THERMAL_LEN,), np.random.default_rng([seed, 3]), dtype)
    if channel == "flow":
        return Discriminator("D_F", (FLOW_LEN,), np.random.default_rng([seed, 4]), dtype)
    raise ValueError(f"unknown channel {channel!r}")


def build_joint_discriminator(seed: int = 0, dtype=np.float32) -> Discriminator:
    return Discriminator("D_TF", (THERMAL_LEN, FLOW_LEN), np.random.default_rng([seed, 5]),
                         dtype)


def model_arrays(models: Sequence) -> Dict[str, np.ndarray]:
    """All parameters and batch-norm statistics keyed ``<role>/<path>``."""
    out: Dict[str, np.ndarray] = {}
    for m in models:
        for k, v in m.params().items():
            out[f"{m.role}/{k}"] = v
        for k, v in m.state().items():
            out[f"{m.role}/{k}"] = v
    return out


def save_models(path, models: Sequence) -> None:
    save_checkpoint(path, model_arrays(models))


def load_models(path, models: Sequence) -> None:
    """Load a checkpoint into already-built models, in place."""
    tensors = load_checkpoint(path)
    by_role = {m.role: m for m in models}
    expected = set(model_arrays(models))
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise ShapeError(f"checkpoint does not match models (missing {missing}, extra {extra})")
    for key, value in tensors.items():
        role, rest = key.split("/", 1)
        m = by_role[role]
        if isinstance(m, Autoencoder):
            m.net.set_param(rest, value)
        else:
            m.set_array(rest, value)
