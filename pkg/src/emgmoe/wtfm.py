"""Wavelet-modulated multi-scale feature extraction.

A normalized patch (L x V) is viewed as a one-channel image. Two conv paths
extract fine (3x3) and coarse (7x7) features; the fine path is decomposed by
a single-level Haar analysis, each band is upsampled back, re-weighted by
channel attention, and the four bands sum into a modulation map applied to
the coarse path with a Hadamard product. The modulated coarse features, the
fine features and a pointwise value embedding of the raw patch concatenate
into the fused feature block handed to the sequence model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .ops import conv2d, dwt2_haar, upsample2x_bicubic
from .tensor import Tensor, _record


@dataclass
class WtfmParams:
    small_kernels: Tensor  # (E, 1, 3, 3)
    large_kernels: Tensor  # (E, 1, 7, 7)
    attn_w1: Tensor  # (r, E)
    attn_w2: Tensor  # (E, r)
    value_kernel: Tensor  # (E_chan, 1, 1, 1) pointwise value embedding

    def __post_init__(self):
        e = self.small_kernels.shape[0]
        r = self.attn_w1.shape[0]
        if self.large_kernels.shape[0] != e:
            raise ShapeError("small/large conv paths must share channel count")
        if self.attn_w1.shape[1] != e or self.attn_w2.shape != (e, r):
            raise ShapeError("attention matrices inconsistent with channel count")
        if e % r != 0:
            raise ConfigError(f"reduction ratio {r} must divide channel count {e}")

    @property
    def channels(self) -> int:
        return self.small_kernels.shape[0]

    @property
    def out_channels(self) -> int:
        return 2 * self.channels + self.value_kernel.shape[0]


def init_wtfm_params(
    rng: np.random.Generator, channels: int = 8, chan_embed: int = 8, reduction: int | None = None
) -> WtfmParams:
    r = reduction if reduction is not None else max(channels // 2, 1)
    small = rng.standard_normal((channels, 1, 3, 3)) / 3.0
    large = rng.standard_normal((channels, 1, 7, 7)) / 7.0
    w1 = rng.standard_normal((r, channels)) / np.sqrt(channels)
    w2 = rng.standard_normal((channels, r)) / np.sqrt(r)
    value = rng.standard_normal((chan_embed, 1, 1, 1))
    return WtfmParams(
        Tensor(small, requires_grad=True),
        Tensor(large, requires_grad=True),
        Tensor(w1, requires_grad=True),
        Tensor(w2, requires_grad=True),
        Tensor(value, requires_grad=True),
    )


def channel_attention(c: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Per-channel weights sigmoid(W2 . relu(W1 . globalmaxpool(c))).

    ``c`` is (..., E, H, W); returns (..., E) with every entry in (0, 1).
    """
    pooled = tn.global_max_pool(c)  # (..., E)
    squeeze = pooled.ndim == 1
    if squeeze:
        pooled = tn.reshape(pooled, (1,) + pooled.shape)
    hidden = tn.relu(tn.matmul(pooled, tn.transpose(w1, (1, 0))))
    alpha = tn.sigmoid(tn.matmul(hidden, tn.transpose(w2, (1, 0))))
    if squeeze:
        alpha = tn.reshape(alpha, (alpha.shape[-1],))
    return alpha


def _scale_channels(c: Tensor, alpha: Tensor) -> Tensor:
    """Multiply (..., E, H, W) maps by per-channel weights (..., E)."""
    a = tn.reshape(alpha, alpha.shape + (1, 1))
    return tn.mul(c, tn.expand(a, c.shape))


def _merged_kernels(params: WtfmParams) -> Tensor:
    """Zero-embed the 3x3 and 1x1 kernels into one 7x7 bank.

    One conv2d call then serves all three paths; the backward rule slices
    the merged kernel gradient back onto the separate parameters.
    """
    e = params.channels
    ec = params.value_kernel.shape[0]
    kd = np.zeros((2 * e + ec, 1, 7, 7))
    kd[:e] = params.large_kernels.data
    kd[e : 2 * e, :, 2:5, 2:5] = params.small_kernels.data
    kd[2 * e :, :, 3:4, 3:4] = params.value_kernel.data
    out = Tensor(kd)

    def bwd(g):
        return g[:e], g[e : 2 * e, :, 2:5, 2:5], g[2 * e :, :, 3:4, 3:4]

    return _record(
        out, (params.large_kernels, params.small_kernels, params.value_kernel), bwd
    )


def _split_paths(y: Tensor, e: int):
    """Split merged conv output channels into (large, small, value) maps."""
    a = Tensor(y.data[:, :e])
    b = Tensor(y.data[:, e : 2 * e])
    c = Tensor(y.data[:, 2 * e :])

    def bwd(ga, gb, gc):
        return (np.concatenate([ga, gb, gc], axis=1),)

    return _record((a, b, c), (y,), bwd)


def wtfm_forward(p: Tensor, params: WtfmParams) -> Tensor:
    """Fused multi-scale features for a batch of patches.

    ``p`` is (B, L, V) (or a single (L, V) patch); the result is
    (B, 2E + E_chan, L, V).
    """
    squeeze = p.ndim == 2
    if squeeze:
        p = tn.reshape(p, (1,) + p.shape)
    x = tn.reshape(p, (p.shape[0], 1, p.shape[1], p.shape[2]))
    feats = conv2d(x, _merged_kernels(params))
    f_large, f_small, f_chan = _split_paths(feats, params.channels)
    bands = tn.stack(list(dwt2_haar(f_small)), axis=0)  # (4, B, E, L/2, V/2)
    up = upsample2x_bicubic(bands)
    alpha = channel_attention(up, params.attn_w1, params.attn_w2)  # (4, B, E)
    mod = tn.tsum(_scale_channels(up, alpha), axis=0)
    f_mod = tn.hadamard(f_large, mod)
    z = tn.concat([f_mod, f_small, f_chan], axis=1)
    return tn.reshape(z, z.shape[1:]) if squeeze else z
