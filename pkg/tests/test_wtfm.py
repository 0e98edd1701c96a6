"""Wavelet-modulated multi-scale feature block."""

import numpy as np
import pytest

from emgmoe import tensor as tn
from emgmoe.errors import ConfigError, ShapeError
from emgmoe.gradcheck import check_gradients
from emgmoe.tensor import Tensor
from emgmoe.wtfm import WtfmParams, channel_attention, init_wtfm_params, wtfm_forward

from test_ops import cubic, naive_conv2d


def make_params(rng, e=4, ec=2, r=2):
    return init_wtfm_params(rng, channels=e, chan_embed=ec, reduction=r)


# ---------------------------------------------------------------------------
# channel attention


def test_attention_zero_weights_give_half(rng):
    e, r = 4, 2
    c = Tensor(rng.standard_normal((e, 5, 6)))
    alpha = channel_attention(c, Tensor(np.zeros((r, e))), Tensor(np.zeros((e, r))))
    assert alpha.shape == (e,)
    assert np.allclose(alpha.data, 0.5)


def test_attention_strict_range(rng):
    e, r = 6, 3
    c = Tensor(rng.standard_normal((2, e, 4, 4)) * 50.0)
    w1 = Tensor(rng.standard_normal((r, e)))
    w2 = Tensor(rng.standard_normal((e, r)))
    alpha = channel_attention(c, w1, w2).data
    assert np.all(alpha > 0.0) and np.all(alpha < 1.0)


def test_attention_formula_oracle(rng):
    e, r = 4, 2
    c = rng.standard_normal((e, 5, 5))
    w1 = rng.standard_normal((r, e))
    w2 = rng.standard_normal((e, r))
    got = channel_attention(Tensor(c), Tensor(w1), Tensor(w2)).data
    pooled = c.max(axis=(1, 2))
    want = 1.0 / (1.0 + np.exp(-(w2 @ np.maximum(w1 @ pooled, 0.0))))
    assert np.max(np.abs(got - want)) < 1e-12


def test_attention_permutation_equivariance(rng):
    e, r = 4, 2
    c = rng.standard_normal((e, 3, 3))
    w1 = rng.standard_normal((r, e))
    w2 = rng.standard_normal((e, r))
    perm = np.array([2, 0, 3, 1])
    base = channel_attention(Tensor(c), Tensor(w1), Tensor(w2)).data
    swapped = channel_attention(
        Tensor(c[perm]), Tensor(w1[:, perm]), Tensor(w2[perm]),
    ).data
    assert np.allclose(swapped, base[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# parameter validation


def test_params_validation(rng):
    with pytest.raises(ShapeError):
        WtfmParams(
            Tensor(np.zeros((4, 1, 3, 3))),
            Tensor(np.zeros((3, 1, 7, 7))),
            Tensor(np.zeros((2, 4))),
            Tensor(np.zeros((4, 2))),
            Tensor(np.zeros((2, 1, 1, 1))),
        )
    with pytest.raises(ConfigError):
        WtfmParams(
            Tensor(np.zeros((4, 1, 3, 3))),
            Tensor(np.zeros((4, 1, 7, 7))),
            Tensor(np.zeros((3, 4))),
            Tensor(np.zeros((4, 3))),
            Tensor(np.zeros((2, 1, 1, 1))),
        )


# ---------------------------------------------------------------------------
# full block


def test_zero_patch_gives_zero_features(rng):
    params = make_params(rng)
    z = wtfm_forward(Tensor(np.zeros((8, 6))), params)
    assert np.array_equal(z.data, np.zeros_like(z.data))


def test_output_shape_paper_dims(rng):
    params = init_wtfm_params(rng, channels=8, chan_embed=8)
    z = wtfm_forward(Tensor(rng.uniform(-1, 1, (2, 64, 16))), params)
    assert z.shape == (2, 24, 64, 16)
    assert params.out_channels == 24


def test_forward_deterministic(rng):
    params = make_params(rng)
    p = rng.uniform(-1, 1, (12, 8))
    a = wtfm_forward(Tensor(p), params).data
    b = wtfm_forward(Tensor(p), params).data
    assert np.array_equal(a, b)


def naive_wtfm(p, params):
    """Straight-line numpy re-derivation of the whole block for one patch."""
    x = p[None]  # (1, L, V) single input channel
    f_small = naive_conv2d(x, params.small_kernels.data)
    f_large = naive_conv2d(x, params.large_kernels.data)
    f_chan = naive_conv2d(x, params.value_kernel.data)
    a = f_small[:, 0::2, 0::2]
    b = f_small[:, 0::2, 1::2]
    c = f_small[:, 1::2, 0::2]
    d = f_small[:, 1::2, 1::2]
    bands = [
        (a + b + c + d) / 2.0,
        (a + b - c - d) / 2.0,
        (a - b + c - d) / 2.0,
        (a - b - c + d) / 2.0,
    ]
    w1, w2 = params.attn_w1.data, params.attn_w2.data
    mod = np.zeros_like(f_large)
    for band in bands:
        up = np.stack([_naive_up(band[e]) for e in range(band.shape[0])])
        pooled = up.max(axis=(1, 2))
        alpha = 1.0 / (1.0 + np.exp(-(w2 @ np.maximum(w1 @ pooled, 0.0))))
        mod += alpha[:, None, None] * up
    return np.concatenate([f_large * mod, f_small, f_chan], axis=0)


def _naive_up(x):
    h, w = x.shape
    y = np.zeros((2 * h, 2 * w))
    for oi in range(2 * h):
        for oj in range(2 * w):
            pi = (oi + 0.5) / 2.0 - 0.5
            pj = (oj + 0.5) / 2.0 - 0.5
            bi, bj = int(np.floor(pi)), int(np.floor(pj))
            for di in range(-1, 3):
                for dj in range(-1, 3):
                    si = min(max(bi + di, 0), h - 1)
                    sj = min(max(bj + dj, 0), w - 1)
                    y[oi, oj] += cubic(pi - bi - di) * cubic(pj - bj - dj) * x[si, sj]
    return y


def test_forward_matches_naive_oracle(rng):
    params = make_params(rng, e=2, ec=2, r=1)
    p = rng.uniform(-1.0, 1.0, (8, 6))
    got = wtfm_forward(Tensor(p), params).data
    want = naive_wtfm(p, params)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-10


def test_block_gradcheck(rng):
    params = make_params(rng, e=2, ec=1, r=1)
    p = Tensor(rng.uniform(-1.0, 1.0, (6, 4)))
    named = {
        "small": params.small_kernels,
        "large": params.large_kernels,
        "w1": params.attn_w1,
        "w2": params.attn_w2,
        "value": params.value_kernel,
    }
    errs = check_gradients(
        lambda: tn.tsum(tn.square(wtfm_forward(p, params))), named
    )
    assert max(errs.values()) < 1e-4, errs
