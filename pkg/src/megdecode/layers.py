"""Neural network layers with exact trainable-parameter accounting.

Every layer owns named parameter Tensors, initialized Glorot-uniform from a
caller-supplied numpy Generator so builds are reproducible. Two independent
routes give parameter counts: `layer_param_count` computes the closed-form
tally from a configuration alone, and each built layer reports the summed
size of its actual parameter arrays. Tests require the routes to agree.

Layout conventions: images are NHWC; sequences are (batch, time, width).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def layer_param_count(kind, **cfg):
    """Trainable parameters a layer would hold, from its configuration alone.

    Formulas:
      conv2d            filters * (kh*kw*in_channels + bias)
      depthwise_conv2d  kh*kw*in_channels*depth_multiplier (+ bias terms)
      separable_conv2d  kd*in_channels + in_channels*filters + filters*bias
      dense             units * (in_width + bias)
      lstm              4*hidden*(in_width + hidden + 1)
      batchnorm         2*channels (scale and shift; running stats not trained)
      attention         heads*(2*d_k + d_v)*in_width + heads*d_v*out_width
      global_attention  query_width*state_width + (state_width+query_width)*out_width
    Structural kinds (input, flatten, dropout, avg_pool, add, concat) hold none.
    """
    b = 1 if cfg.get("bias", True) else 0
    if kind == "conv2d":
        kh, kw = cfg["kernel"]
        return cfg["filters"] * (kh * kw * cfg["in_channels"] + b)
    if kind == "depthwise_conv2d":
        kh, kw = cfg["kernel"]
        mult = cfg.get("depth_multiplier", 1)
        bias = cfg["in_channels"] * mult if cfg.get("bias", False) else 0
        return kh * kw * cfg["in_channels"] * mult + bias
    if kind == "separable_conv2d":
        kd = cfg["kernel"][1] if isinstance(cfg["kernel"], (tuple, list)) else cfg["kernel"]
        c, f = cfg["in_channels"], cfg["filters"]
        return kd * c + c * f + f * b
    if kind == "dense":
        return cfg["units"] * (cfg["in_width"] + b)
    if kind == "lstm":
        h = cfg["hidden"]
        return 4 * h * (cfg["in_width"] + h + 1)
    if kind == "batchnorm":
        return 2 * cfg["channels"]
    if kind == "attention":
        heads = cfg.get("heads", 2)
        d_k, d_v = cfg["d_k"], cfg["d_v"]
        out = cfg.get("out_width", heads * d_v)
        return heads * (2 * d_k + d_v) * cfg["in_width"] + heads * d_v * out
    if kind == "global_attention":
        s, q = cfg["state_width"], cfg["query_width"]
        return q * s + (s + q) * cfg["out_width"]
    if kind in ("input", "flatten", "dropout", "avg_pool", "add", "concat"):
        return 0
    raise ConfigError(f"unknown layer kind {kind!r}")


class Layer:
    """Base: named parameters plus a count derived from the live arrays."""

    def params(self):
        return []

    def param_count(self):
        return sum(int(p.size) for _, p in self.params())


class Dense(Layer):
    def __init__(self, in_width, units, bias=True, rng=None, dtype=np.float64):
        if in_width < 1 or units < 1:
            raise ConfigError(f"dense needs positive sizes, got in={in_width} units={units}")
        rng = rng or np.random.default_rng(0)
        self.in_width, self.units, self.use_bias = in_width, units, bias
        self.w = T.Tensor(glorot_uniform(rng, (in_width, units), in_width, units, dtype), requires_grad=True)
        self.b = T.Tensor(np.zeros(units, dtype=dtype), requires_grad=True) if bias else None

    def params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def __call__(self, x):
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"dense expects width {self.in_width}, got {x.shape}")
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y


class Conv2D(Layer):
    def __init__(self, in_channels, filters, kernel, padding="same", bias=True,
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        kh, kw = kernel
        if min(kh, kw, in_channels, filters) < 1:
            raise ConfigError(f"conv2d config invalid: kernel {kernel}, C={in_channels}, F={filters}")
        self.in_channels, self.filters, self.kernel, self.padding = in_channels, filters, (kh, kw), padding
        fan_in, fan_out = kh * kw * in_channels, kh * kw * filters
        self.w = T.Tensor(glorot_uniform(rng, (kh, kw, in_channels, filters), fan_in, fan_out, dtype),
                          requires_grad=True)
        self.b = T.Tensor(np.zeros(filters, dtype=dtype), requires_grad=True) if bias else None

    def params(self):
        out = [("w", self.w)]
        if self.b is not None:
            out.append(("b", self.b))
        return out

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, padding=self.padding)


class DepthwiseConv2D(Layer):
    def __init__(self, in_channels, kernel, depth_multiplier=1, padding="valid",
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        kh, kw = kernel
        if min(kh, kw, in_channels, depth_multiplier) < 1:
            raise ConfigError(f"depthwise config invalid: kernel {kernel}, C={in_channels}, mult={depth_multiplier}")
        self.in_channels, self.kernel, self.depth_multiplier, self.padding = in_channels, (kh, kw), depth_multiplier, padding
        fan_in, fan_out = kh * kw, kh * kw * depth_multiplier
        self.w = T.Tensor(glorot_uniform(rng, (kh, kw, in_channels, depth_multiplier), fan_in, fan_out, dtype),
                          requires_grad=True)

    def params(self):
        return [("w", self.w)]

    def __call__(self, x):
        return T.depthwise_conv2d(x, self.w, padding=self.padding)


class SeparableConv2D(Layer):
    """Depthwise (1,kd) pass then a 1x1 pointwise projection with bias."""

    def __init__(self, in_channels, filters, kernel_length, padding="same",
                 rng=None, dtype=np.float64):
        rng = rng or np.random.default_rng(0)
        if min(in_channels, filters, kernel_length) < 1:
            raise ConfigError(f"separable config invalid: C={in_channels}, F={filters}, kd={kernel_length}")
        self.in_channels, self.filters, self.kernel_length, self.padding = in_channels, filters, kernel_length, padding
        self.dw = T.Tensor(glorot_uniform(rng, (1, kernel_length, in_channels, 1), kernel_length, kernel_length, dtype),
                           requires_grad=True)
        self.pw = T.Tensor(glorot_uniform(rng, (1, 1, in_channels, filters), in_channels, filters, dtype),
                           requires_grad=True)
        self.b = T.Tensor(np.zeros(filters, dtype=dtype), requires_grad=True)

    def params(self):
        return [("dw", self.dw), ("pw", self.pw), ("b", self.b)]

    def __call__(self, x):
        y = T.depthwise_conv2d(x, self.dw, padding=self.padding)
        return T.conv2d(y, self.pw, self.b, padding="valid")


class BatchNorm(Layer):
    """Normalize over all axes but the last; scale/shift are trainable.

    Running statistics use the same biased batch variance that normalization
    does, updated with momentum, and drive inference mode.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float64):
        if channels < 1:
            raise ConfigError(f"batchnorm needs channels >= 1, got {channels}")
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def __call__(self, x, training=False):
        if x.shape[-1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape}")
        if training:
            if x.shape[0] < 2:
                raise ShapeError("batchnorm training mode needs batch size >= 2")
            axes = tuple(range(x.ndim - 1))
            m = T.tmean(x, axis=axes)
            centered = T.sub(x, m)
            v = T.tmean(T.mul(centered, centered), axis=axes)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * m.data
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * v.data
            xhat = T.div(centered, T.sqrt(T.add(v, self.eps)))
        else:
            denom = np.sqrt(self.running_var + self.eps)
            xhat = T.div(T.sub(x, T.Tensor(self.running_mean.astype(x.dtype))),
                         T.Tensor(denom.astype(x.dtype)))
        return T.add(T.mul(xhat, self.gamma), self.beta)


class AvgPool2D(Layer):
    def __init__(self, pool):
        if min(pool) < 1:
            raise ConfigError(f"pool sizes must be >= 1, got {pool}")
        self.pool = tuple(pool)

    def __call__(self, x):
        return T.avg_pool2d(x, self.pool)


class Dropout(Layer):
    """Inverted dropout: train-time scaling by 1/(1-rate), identity at inference."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ConfigError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return T.mul(x, T.Tensor(keep))


class Flatten(Layer):
    def __call__(self, x):
        return T.reshape(x, (x.shape[0], -1))


class LSTM(Layer):
    """Single-layer LSTM, gate order (input, forget, cell, output).

    Weights follow the fused layout: w (in, 4h) for the input path, u (h, 4h)
    for the recurrent path, bias (4h,) with the forget slice started at 1.
    """

    def __init__(self, in_width, hidden, return_sequences=False, rng=None, dtype=np.float64):
        if in_width < 1 or hidden < 1:
            raise ConfigError(f"lstm needs positive sizes, got in={in_width} hidden={hidden}")
        rng = rng or np.random.default_rng(0)
        self.in_width, self.hidden, self.return_sequences = in_width, hidden, return_sequences
        self.w = T.Tensor(glorot_uniform(rng, (in_width, 4 * hidden), in_width, 4 * hidden, dtype),
                          requires_grad=True)
        self.u = T.Tensor(glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype),
                          requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0
        self.b = T.Tensor(bias, requires_grad=True)

    def params(self):
        return [("w", self.w), ("u", self.u), ("b", self.b)]

    def __call__(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_width:
            raise ShapeError(f"lstm expects (batch, time, {self.in_width}), got {x.shape}")
        bsz, steps, _ = x.shape
        if steps < 1:
            raise ShapeError("lstm needs at least one time step")
        h = T.Tensor(np.zeros((bsz, self.hidden), dtype=x.dtype))
        c = T.Tensor(np.zeros((bsz, self.hidden), dtype=x.dtype))
        nh = self.hidden
        outs = []
        for t in range(steps):
            xt = x[:, t, :]
            z = T.add(T.add(T.matmul(xt, self.w), T.matmul(h, self.u)), self.b)
            i = T.sigmoid(z[:, 0:nh])
            f = T.sigmoid(z[:, nh:2 * nh])
            g = T.tanh(z[:, 2 * nh:3 * nh])
            o = T.sigmoid(z[:, 3 * nh:4 * nh])
            c = T.add(T.mul(f, c), T.mul(i, g))
            h = T.mul(o, T.tanh(c))
            if self.return_sequences:
                outs.append(h)
        return T.stack(outs, axis=1) if self.return_sequences else h
