"""Inspect the wavelet-modulated feature extractor on a single patch.

A patch is filtered by two conv banks (coarse 7x7, fine 3x3); the fine map
is decomposed into four half-resolution wavelet bands, each band is
upsampled back, reweighted by channel attention, and their sum modulates
the coarse map before everything is concatenated.
"""

import numpy as np

from emgmoe.ops import dwt2_haar
from emgmoe.sigproc import preprocess, synth_dataset
from emgmoe.tensor import Tensor, no_grad
from emgmoe.wtfm import channel_attention, init_wtfm_params, wtfm_forward
from emgmoe.ops import conv2d

rng = np.random.default_rng(0)
params = init_wtfm_params(rng, channels=4, chan_embed=4)

rec = synth_dataset(seed=0, subjects=1, sessions=1, classes=2, t=1000, v=16)[0]
patch = preprocess(rec).patches[0]  # (64, 16)

with no_grad():
    x = Tensor(patch[None, None])  # (1, 1, 64, 16)
    fine = conv2d(x, params.small_kernels)
    bands = dwt2_haar(fine)
    for name, band in zip(["cA", "cH", "cV", "cD"], bands):
        print(f"band {name}: shape {band.data.shape}, "
              f"energy {np.sum(band.data ** 2):9.3f}")

    alpha = channel_attention(fine, params.attn_w1, params.attn_w2)
    print("attention weights per fine channel:",
          np.round(alpha.data.ravel(), 3))

    fused = wtfm_forward(Tensor(patch[None]), params)  # (B, L, V) input
    print(f"fused feature stack: {fused.data.shape} "
          f"(= 2 x {params.channels} conv paths + {params.value_kernel.shape[0]} value channels)")
