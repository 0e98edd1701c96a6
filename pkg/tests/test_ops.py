"""Structured operators: convolutions, bicubic upsampling, Haar analysis,
zero-order-hold discretization, and the channel collapse."""

import numpy as np
import pytest

from emgmoe import ops, tensor as tn
from emgmoe.errors import ConfigError, ShapeError
from emgmoe.gradcheck import check_gradients
from emgmoe.tensor import Tensor, backward


def tensor(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# conv2d


def naive_conv2d(x, k):
    """Direct quadruple-loop cross-correlation with zero padding."""
    co, ci, kh, kw = k.shape
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    y = np.zeros((co, h, w))
    for o in range(co):
        for i in range(h):
            for j in range(w):
                for di in range(kh):
                    for dj in range(kw):
                        y[o, i, j] += (k[o, :, di, dj] * xp[:, i + di, j + dj]).sum()
    return y


def test_conv2d_identity_kernel(rng):
    x = tensor(rng.standard_normal((1, 5, 6)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.allclose(ops.conv2d(x, tensor(k)).data, x.data)


def test_conv2d_ones_counting():
    x = tensor(np.ones((1, 5, 5)))
    k = tensor(np.ones((1, 1, 3, 3)))
    y = ops.conv2d(x, k).data[0]
    assert y[2, 2] == 9.0
    assert y[0, 0] == 4.0
    assert y[0, 2] == 6.0


def test_conv2d_matches_naive(rng):
    x = rng.standard_normal((2, 6, 7))
    k = rng.standard_normal((3, 2, 3, 3))
    got = ops.conv2d(tensor(x), tensor(k)).data
    assert np.max(np.abs(got - naive_conv2d(x, k))) < 1e-12


def test_conv2d_batched_matches_per_sample(rng):
    x = rng.standard_normal((3, 1, 4, 5))
    k = rng.standard_normal((2, 1, 3, 3))
    got = ops.conv2d(tensor(x), tensor(k)).data
    for b in range(3):
        assert np.max(np.abs(got[b] - naive_conv2d(x[b], k))) < 1e-12


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ConfigError):
        ops.conv2d(tensor(np.ones((1, 4, 4))), tensor(np.ones((1, 1, 2, 2))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(tensor(np.ones((2, 4, 4))), tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_gradcheck(rng):
    x = tensor(rng.standard_normal((2, 2, 4, 5)))
    k = tensor(rng.standard_normal((3, 2, 3, 3)))
    errs = check_gradients(
        lambda: tn.tsum(tn.square(ops.conv2d(x, k))), {"x": x, "k": k}
    )
    assert max(errs.values()) < 1e-6, errs


# ---------------------------------------------------------------------------
# conv1d (depthwise, causal)


def test_conv1d_identity_kernel(rng):
    x = rng.standard_normal((2, 9))
    y = ops.conv1d(tensor(x), tensor(np.ones((2, 1))))
    assert np.allclose(y.data, x)


def test_conv1d_unit_delay():
    x = tensor([[1.0, 2.0, 3.0]])
    y = ops.conv1d(x, tensor([[0.0, 1.0]]), padding="causal")
    assert np.allclose(y.data, [[0.0, 1.0, 2.0]])


def test_conv1d_matches_naive(rng):
    c, length, w = 3, 12, 4
    x = rng.standard_normal((c, length))
    k = rng.standard_normal((c, w))
    got = ops.conv1d(tensor(x), tensor(k)).data
    want = np.zeros((c, length))
    for ch in range(c):
        for t in range(length):
            for j in range(w):
                if t - j >= 0:
                    want[ch, t] += k[ch, j] * x[ch, t - j]
    assert np.max(np.abs(got - want)) < 1e-12


def test_conv1d_causality(rng):
    x = rng.standard_normal((1, 8, 2))
    k = tensor(rng.standard_normal((2, 4)))
    base = ops.conv1d_depthwise(Tensor(x), k).data
    bumped = x.copy()
    bumped[0, 5] += 1.0
    pert = ops.conv1d_depthwise(Tensor(bumped), k).data
    assert np.array_equal(base[0, :5], pert[0, :5])
    assert not np.allclose(base[0, 5:], pert[0, 5:])


def test_conv1d_same_padding_centers_odd_kernel():
    x = tensor([[0.0, 0.0, 1.0, 0.0, 0.0]])
    y = ops.conv1d(x, tensor([[1.0, 2.0, 3.0]]), padding="same")
    # same padding advances the causal response by w//2 samples
    assert np.allclose(y.data, [[0.0, 1.0, 2.0, 3.0, 0.0]])


def test_conv1d_gradcheck(rng):
    x = tensor(rng.standard_normal((2, 6, 3)))
    k = tensor(rng.standard_normal((3, 4)))
    errs = check_gradients(
        lambda: tn.tsum(tn.square(ops.conv1d_depthwise(x, k))), {"x": x, "k": k}
    )
    assert max(errs.values()) < 1e-6, errs


def test_conv1d_rejects_bad_padding():
    with pytest.raises(ConfigError):
        ops.conv1d_depthwise(tensor(np.ones((1, 4, 1))), tensor(np.ones((1, 2))), padding="full")


# ---------------------------------------------------------------------------
# bicubic upsampling


def cubic(s, a=-0.5):
    s = abs(s)
    if s <= 1.0:
        return (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0
    if s < 2.0:
        return a * (s**3 - 5.0 * s**2 + 8.0 * s - 4.0)
    return 0.0


def naive_upsample2x(x):
    """Per-pixel 16-tap bicubic evaluation with edge clamping."""
    h, w = x.shape
    y = np.zeros((2 * h, 2 * w))
    for oi in range(2 * h):
        for oj in range(2 * w):
            pi = (oi + 0.5) / 2.0 - 0.5
            pj = (oj + 0.5) / 2.0 - 0.5
            bi, bj = int(np.floor(pi)), int(np.floor(pj))
            ti, tj = pi - bi, pj - bj
            acc = 0.0
            for di in range(-1, 3):
                for dj in range(-1, 3):
                    si = min(max(bi + di, 0), h - 1)
                    sj = min(max(bj + dj, 0), w - 1)
                    acc += cubic(ti - di) * cubic(tj - dj) * x[si, sj]
            y[oi, oj] = acc
    return y


def test_upsample_constant_map():
    x = tensor(np.full((3, 4), 2.5))
    y = ops.upsample2x_bicubic(x).data
    assert y.shape == (6, 8)
    assert np.max(np.abs(y - 2.5)) < 1e-12


def test_upsample_linear_ramp():
    ramp = np.arange(8.0)[None, :].repeat(4, axis=0)
    y = ops.upsample2x_bicubic(tensor(ramp)).data
    # interior output positions map to source coordinate (j+0.5)/2-0.5;
    # the outermost columns touch the clamped edge taps and are excluded
    cols = (np.arange(16) + 0.5) / 2.0 - 0.5
    interior = slice(3, 13)
    assert np.max(np.abs(y[:, interior] - cols[interior][None, :])) < 1e-9


def test_upsample_matches_naive(rng):
    x = rng.standard_normal((5, 6))
    got = ops.upsample2x_bicubic(tensor(x)).data
    assert np.max(np.abs(got - naive_upsample2x(x))) < 1e-12


def test_upsample_batched_gradcheck(rng):
    x = tensor(rng.standard_normal((2, 3, 4)))
    errs = check_gradients(
        lambda: tn.tsum(tn.square(ops.upsample2x_bicubic(x))), {"x": x}
    )
    assert max(errs.values()) < 1e-6, errs


# ---------------------------------------------------------------------------
# Haar analysis


def inverse_haar(ca, ch, cv, cd):
    """Independent synthesis oracle for the orthonormal analysis bands."""
    h2, w2 = ca.shape[-2], ca.shape[-1]
    out = np.zeros(ca.shape[:-2] + (2 * h2, 2 * w2))
    out[..., 0::2, 0::2] = (ca + ch + cv + cd) / 2.0
    out[..., 0::2, 1::2] = (ca + ch - cv - cd) / 2.0
    out[..., 1::2, 0::2] = (ca - ch + cv - cd) / 2.0
    out[..., 1::2, 1::2] = (ca - ch - cv + cd) / 2.0
    return out


def test_dwt_constant_block():
    x = tensor(np.ones((2, 2)))
    ca, ch, cv, cd = (b.data for b in ops.dwt2_haar(x))
    assert np.allclose(ca, 2.0)
    assert np.allclose(ch, 0.0) and np.allclose(cv, 0.0) and np.allclose(cd, 0.0)


def test_dwt_checkerboard():
    x = tensor([[1.0, -1.0], [-1.0, 1.0]])
    ca, ch, cv, cd = (b.data for b in ops.dwt2_haar(x))
    assert np.allclose(cd, 2.0)
    assert np.allclose(ca, 0.0) and np.allclose(ch, 0.0) and np.allclose(cv, 0.0)


def test_dwt_perfect_reconstruction(rng):
    x = rng.standard_normal((3, 8, 8))
    bands = [b.data for b in ops.dwt2_haar(tensor(x))]
    assert np.max(np.abs(inverse_haar(*bands) - x)) < 1e-12


def test_dwt_energy_conservation(rng):
    x = rng.standard_normal((4, 8, 8))
    bands = [b.data for b in ops.dwt2_haar(tensor(x))]
    total = sum(np.sum(b**2) for b in bands)
    assert abs(total - np.sum(x**2)) < 1e-9


def test_dwt_gradcheck_even_and_odd(rng):
    for shape in [(2, 4, 4), (1, 5, 6)]:
        x = tensor(rng.standard_normal(shape))

        def build():
            ca, ch, cv, cd = ops.dwt2_haar(x)
            s = tn.add(tn.tsum(tn.square(ca)), tn.tsum(tn.square(ch)))
            return tn.add(s, tn.add(tn.tsum(tn.square(cv)), tn.tsum(tn.square(cd))))

        errs = check_gradients(build, {"x": x})
        assert max(errs.values()) < 1e-6, (shape, errs)


# ---------------------------------------------------------------------------
# zero-order hold


def test_zoh_closed_form_scalar():
    abar, bbar = ops.zoh_discretize(-1.0, 1.0, np.log(2.0))
    assert abs(abar - 0.5) < 1e-12
    assert abs(bbar - 0.5) < 1e-12


def test_zoh_small_step_limit():
    abar, bbar = ops.zoh_discretize(np.array([-3.0]), np.array([2.0]), np.array([1e-12]))
    assert abs(abar[0] - 1.0) < 1e-9
    assert abs(bbar[0]) < 1e-9


def test_zoh_series_branch_continuity():
    # the two branches must agree to high relative accuracy near the switch
    a, b = -1.0, 1.3
    for delta in [1e-8, 9e-7, 1.1e-6, 1e-4]:
        _, bbar = ops.zoh_discretize(a, b, delta)
        exact = (np.expm1(delta * a) / a) * b
        assert abs(bbar - exact) / abs(exact) < 1e-6, delta


def test_zoh_abar_bounded(rng):
    a = -np.exp(rng.standard_normal((4, 3)))
    delta = np.exp(rng.standard_normal(4))[:, None]
    abar, _ = ops.zoh_discretize(a, np.ones_like(a), delta)
    assert np.all(abar > 0.0) and np.all(abar <= 1.0)


# ---------------------------------------------------------------------------
# channel collapse


def test_channel_collapse_value_and_gradient(rng):
    x = tensor(rng.standard_normal((2, 3, 4, 5)))
    w = tensor(rng.standard_normal(3))
    y = ops.channel_collapse(x, w)
    assert np.allclose(y.data, np.einsum("bchw,c->bhw", x.data, w.data), atol=1e-12)
    errs = check_gradients(
        lambda: tn.tsum(tn.square(ops.channel_collapse(x, w))), {"x": x, "w": w}
    )
    assert max(errs.values()) < 1e-6, errs


def test_channel_collapse_shape_check():
    with pytest.raises(ShapeError):
        ops.channel_collapse(tensor(np.ones((2, 3, 4, 5))), tensor(np.ones(4)))
