"""U-Net encoder/decoder with skip connections.

Per encoder level: two 3x3 conv + ReLU, then 2x2 max pooling. The bottleneck
has two 3x3 conv + ReLU. Per decoder level: nearest upsample, 3x3 conv +
ReLU, channel concat with the skip, two 3x3 conv + ReLU. A final 1x1 conv
gives a linear single-channel output.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .layers import ShapeError


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")

    def channels(self, level):
        return self.base_channels * 2**level

    def check_input(self, h, w):
        m = 2**self.depth
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} not divisible by 2^depth = {m}")

    def layer_shapes(self):
        """Ordered ``name -> weight shape`` for every conv layer."""
        shapes = OrderedDict()
        cin = self.in_channels
        for lvl in range(self.depth):
            c = self.channels(lvl)
            shapes[f"enc{lvl}.conv1"] = (3, 3, cin, c)
            shapes[f"enc{lvl}.conv2"] = (3, 3, c, c)
            cin = c
        c = self.channels(self.depth)
        shapes["bottom.conv1"] = (3, 3, cin, c)
        shapes["bottom.conv2"] = (3, 3, c, c)
        for lvl in reversed(range(self.depth)):
            c = self.channels(lvl)
            shapes[f"dec{lvl}.up"] = (3, 3, self.channels(lvl + 1), c)
            shapes[f"dec{lvl}.conv1"] = (3, 3, 2 * c, c)
            shapes[f"dec{lvl}.conv2"] = (3, 3, c, c)
        shapes["head"] = (1, 1, self.channels(0), self.out_channels)
        return shapes


PRESETS = {
    "desk": UNetConfig(depth=3, base_channels=16),
    "fidelity": UNetConfig(depth=4, base_channels=32),
}


def he_init(shape, fan_in, seed=0, dtype=np.float32):
    """Normal(0, sqrt(2 / fan_in)) samples."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_params(config, seed=0, dtype=np.float32):
    """He-initialized weights, zero biases, as an ordered name -> array dict."""
    params = OrderedDict()
    seeds = np.random.SeedSequence(seed).spawn(len(config.layer_shapes()))
    for ss, (name, shape) in zip(seeds, config.layer_shapes().items()):
        fan_in = shape[0] * shape[1] * shape[2]
        params[f"{name}.w"] = he_init(shape, fan_in, ss, dtype)
        params[f"{name}.b"] = np.zeros(shape[3], dtype=dtype)
    return params


def check_params(params, config):
    """Names of tensors that are missing, unexpected or mis-shaped."""
    expected = OrderedDict()
    for name, shape in config.layer_shapes().items():
        expected[f"{name}.w"] = shape
        expected[f"{name}.b"] = (shape[3],)
    problems = []
    for name, shape in expected.items():
        if name not in params:
            problems.append(f"{name}: missing (expected {shape})")
        elif tuple(params[name].shape) != shape:
            problems.append(f"{name}: shape {tuple(params[name].shape)} != {shape}")
    problems.extend(f"{name}: unexpected" for name in params if name not in expected)
    return problems


def _as_nhwc(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, :, :, None]
    if x.ndim == 3:
        return x[:, :, :, None]
    return x


def forward(params, config, x, keep_cache=False):
    """Run the network on ``x`` (H x W, N x H x W or NHWC).

    Returns an NHWC array, plus the backward cache when ``keep_cache``.
    """
    x = _as_nhwc(x).astype(params["head.w"].dtype, copy=False)
    config.check_input(x.shape[1], x.shape[2])
    cache = []

    def conv_relu(name, a):
        a, c1 = L.conv2d_forward(a, params[f"{name}.w"], params[f"{name}.b"])
        a, c2 = L.relu_forward(a)
        cache.append(("conv_relu", name, c1, c2))
        return a

    skips = []
    a = x
    for lvl in range(config.depth):
        a = conv_relu(f"enc{lvl}.conv1", a)
        a = conv_relu(f"enc{lvl}.conv2", a)
        skips.append(a)
        a, pc = L.maxpool2_forward(a)
        cache.append(("pool", lvl, pc, None))
    a = conv_relu("bottom.conv1", a)
    a = conv_relu("bottom.conv2", a)
    bottleneck = (x.shape[1] >> config.depth, x.shape[2] >> config.depth)
    assert a.shape[1:3] == bottleneck, (a.shape, bottleneck)
    for lvl in reversed(range(config.depth)):
        a = L.upsample2_forward(a)
        cache.append(("up", None, None, None))
        a = conv_relu(f"dec{lvl}.up", a)
        a, split = L.concat_forward(a, skips[lvl])
        cache.append(("concat", lvl, split, None))
        a = conv_relu(f"dec{lvl}.conv1", a)
        a = conv_relu(f"dec{lvl}.conv2", a)
    out, hc = L.conv2d_forward(a, params["head.w"], params["head.b"])
    cache.append(("conv", "head", hc, None))
    if keep_cache:
        return out, cache
    return out


def backward(params, cache, dout):
    """Reverse-mode gradients for every parameter, given d(loss)/d(output)."""
    grads = OrderedDict((name, None) for name in params)
    skip_grads = {}
    d = dout
    for kind, name, c1, c2 in reversed(cache):
        if kind == "conv":
            d, dw, db = L.conv2d_backward(d, c1)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        elif kind == "conv_relu":
            d = L.relu_backward(d, c2)
            d, dw, db = L.conv2d_backward(d, c1)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        elif kind == "concat":
            d, skip_grads[name] = L.concat_backward(d, c1)
        elif kind == "up":
            d = L.upsample2_backward(d)
        elif kind == "pool":
            # pooled input is also this level's skip tensor
            d = L.maxpool2_backward(d, c1) + skip_grads.pop(name)
    return grads


def loss_and_grads(params, config, x, target):
    """MSE loss and exact parameter gradients for one batch."""
    out, cache = forward(params, config, x, keep_cache=True)
    target = _as_nhwc(target).astype(out.dtype, copy=False)
    if target.shape != out.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")
    loss, dout = L.mse_loss(out, target)
    return loss, backward(params, cache, dout)
