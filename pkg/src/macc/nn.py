"""Layers, the Adam optimizer, and binary model checkpoints.

Layers are thin descriptors around the autodiff primitives; each knows its
extents so a network can be serialized as (descriptor block, flat parameter
list) and rebuilt for loading.  Weight init is uniform Glorot, biases zero.
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

CHECKPOINT_MAGIC = b"MACCNN01"

# layer kind codes used in the checkpoint descriptor block
KIND_DENSE = 1
KIND_CONV = 2
KIND_TCONV = 3
KIND_RELU = 4
KIND_SIGMOID = 5
KIND_TANH = 6
KIND_FLATTEN = 7
KIND_RESHAPE = 8


class MissingGradError(RuntimeError):
    pass


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer: parameter-free unless overridden."""

    name = "layer"

    def params(self):
        return []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def descriptor(self):
        """(kind, extents) pair for the checkpoint header."""
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng=None, name="dense"):
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.name = name
        w = glorot_uniform(rng, (self.in_dim, self.out_dim), in_dim, out_dim) if rng is not None \
            else np.zeros((self.in_dim, self.out_dim))
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(self.out_dim), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeMismatchError(
                f"layer {self.name}: expected (N, {self.in_dim}), got {x.data.shape}")
        return ad.add(ad.matmul(x, self.w), self.b)

    def descriptor(self):
        return KIND_DENSE, (self.in_dim, self.out_dim)


class Conv2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=0, rng=None, name="conv"):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.pad = int(kernel), int(stride), int(pad)
        self.name = name
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        w = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out) if rng is not None \
            else np.zeros((out_ch, in_ch, kernel, kernel))
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != self.in_ch:
            raise ShapeMismatchError(
                f"layer {self.name}: expected (N, {self.in_ch}, H, W), got {x.data.shape}")
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def descriptor(self):
        return KIND_CONV, (self.in_ch, self.out_ch, self.kernel, self.stride, self.pad)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, pad=0, out_pad=0, rng=None, name="tconv"):
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride = int(kernel), int(stride)
        self.pad, self.out_pad = int(pad), int(out_pad)
        self.name = name
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        w = glorot_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in, fan_out) if rng is not None \
            else np.zeros((in_ch, out_ch, kernel, kernel))
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != self.in_ch:
            raise ShapeMismatchError(
                f"layer {self.name}: expected (N, {self.in_ch}, H, W), got {x.data.shape}")
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                   pad=self.pad, out_pad=self.out_pad)

    def descriptor(self):
        return KIND_TCONV, (self.in_ch, self.out_ch, self.kernel, self.stride,
                            self.pad, self.out_pad)


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        return ad.relu(x)

    def descriptor(self):
        return KIND_RELU, ()


class Sigmoid(Layer):
    name = "sigmoid"

    def forward(self, x):
        return ad.sigmoid(x)

    def descriptor(self):
        return KIND_SIGMOID, ()


class Tanh(Layer):
    name = "tanh"

    def forward(self, x):
        return ad.tanh(x)

    def descriptor(self):
        return KIND_TANH, ()


class Flatten(Layer):
    name = "flatten"

    def forward(self, x):
        return ad.reshape(x, (x.data.shape[0], -1))

    def descriptor(self):
        return KIND_FLATTEN, ()


class Reshape(Layer):
    def __init__(self, *extents):
        self.extents = tuple(int(e) for e in extents)
        self.name = "reshape"

    def forward(self, x):
        return ad.reshape(x, (x.data.shape[0],) + self.extents)

    def descriptor(self):
        return KIND_RESHAPE, self.extents


class Sequential:
    def __init__(self, layers, name="seq"):
        self.layers = list(layers)
        self.name = name

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def __call__(self, x):
        return self.forward(x)


def collect_layers(*parts):
    """Flatten Sequentials / Layers into one declaration-order layer list."""
    out = []
    for part in parts:
        if isinstance(part, Sequential):
            out.extend(part.layers)
        else:
            out.append(part)
    return out


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam with bias correction; clears grads after each step."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradError(f"parameter {p.name or '<unnamed>'} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, layers):
    """Write layers as: magic, u32 layer count, per-layer (u32 kind, u32 n,
    u32 extents...), then all parameters as little-endian float64 in
    declaration order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(layers)))
        for layer in layers:
            kind, extents = layer.descriptor()
            fh.write(struct.pack("<II", kind, len(extents)))
            for e in extents:
                fh.write(struct.pack("<I", e))
        for layer in layers:
            for p in layer.params():
                fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path, layers):
    """Load parameters into an already-built layer list, verifying that the
    stored architecture descriptors match."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        if n_layers != len(layers):
            raise ValueError(f"{path}: checkpoint has {n_layers} layers, model has {len(layers)}")
        for i, layer in enumerate(layers):
            kind, n_ext = struct.unpack("<II", fh.read(8))
            extents = struct.unpack(f"<{n_ext}I", fh.read(4 * n_ext)) if n_ext else ()
            want_kind, want_ext = layer.descriptor()
            if (kind, extents) != (want_kind, tuple(want_ext)):
                raise ValueError(
                    f"{path}: layer {i} descriptor {(kind, extents)} != model {(want_kind, tuple(want_ext))}")
        for layer in layers:
            for p in layer.params():
                raw = fh.read(8 * p.data.size)
                if len(raw) != 8 * p.data.size:
                    raise ValueError(f"{path}: truncated parameter block")
                p.data = np.frombuffer(raw, dtype="<f8").reshape(p.data.shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter block")
