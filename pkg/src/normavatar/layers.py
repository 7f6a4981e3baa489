"""Shared layer helpers: parameter initialization and forward application.

Parameters live in flat ParamSets under slash-separated names; the helpers
here pair an `init_*` (registers parameters) with an `apply_*` (builds the
graph). He-style fan-in scaling at initialization, leaky rectifier slope
0.2 throughout.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

LRELU_SLOPE = 0.2


def init_dense(params, name, fan_in, fan_out, rng, scale=1.0, bias=0.0):
    w = rng.normal(size=(fan_in, fan_out)) * (scale / np.sqrt(fan_in))
    params.add(f"{name}/w", w.astype(np.float32))
    params.add(f"{name}/b", np.full(fan_out, bias, dtype=np.float32))


def apply_dense(params, name, x):
    return x @ params[f"{name}/w"] + params[f"{name}/b"]


def init_conv(params, name, c_in, c_out, rng, k=3, scale=1.0):
    w = rng.normal(size=(c_out, c_in, k, k)) * (scale / np.sqrt(c_in * k * k))
    params.add(f"{name}/w", w.astype(np.float32))
    params.add(f"{name}/b", np.zeros(c_out, dtype=np.float32))


def apply_conv(params, name, x, stride=1, pad=1):
    y = ad.conv2d(x, params[f"{name}/w"], stride=stride, pad=pad)
    b = ad.reshape(params[f"{name}/b"], (1, -1, 1, 1))
    return y + b


def lrelu(x):
    return ad.leaky_relu(x, LRELU_SLOPE)


def pixel_norm(x, axis=1, eps=1e-8):
    """Normalize feature vectors to unit RMS along `axis`."""
    ms = ad.tmean(ad.square(x), axis=axis, keepdims=True)
    return x * ad.pow_const(ms + eps, -0.5)


def l2_normalize(x, axis=-1, eps=1e-12):
    sq = ad.tsum(ad.square(x), axis=axis, keepdims=True)
    return x * ad.pow_const(sq + eps, -0.5)


def flatten(x):
    b = x.data.shape[0]
    return ad.reshape(x, (b, -1))
