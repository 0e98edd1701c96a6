"""Show noisy top-k routing between sequence-mixing experts.

Each patch is summarized by time-pooling its token sequence; the gate adds
trainable noise to its logits, keeps the top-k experts per patch, and two
auxiliary penalties keep traffic spread out and logits small.
"""

import numpy as np

from emgmoe import tensor as tn
from emgmoe.moe import MoeParams, gate, moe_forward, z_loss
from emgmoe.ssm import init_mamba_params
from emgmoe.tensor import Tensor, no_grad

rng = np.random.default_rng(0)
d_model, eta, k = 8, 4, 2
params = MoeParams(
    experts=[init_mamba_params(rng, d_model, state_dim=2, expand=2) for _ in range(eta)],
    w_gate=Tensor(rng.standard_normal((d_model, eta)), requires_grad=True),
    w_noise=Tensor(rng.standard_normal((d_model, eta)) * 0.1, requires_grad=True),
    k=k,
)

tokens = Tensor(rng.standard_normal((6, 10, d_model)))  # 6 patches, 10 steps
with no_grad():
    pooled = tn.tmean(tokens, axis=1)
    decision = gate(pooled, params, training=True, rng=np.random.default_rng(1))

    print(f"routing 6 patches over {eta} experts, top-{k}:")
    for row in decision.weights.data:
        picks = ", ".join(f"e{i}:{w:.2f}" for i, w in enumerate(row) if w > 0)
        print("  ", picks)
    print("expected load per expert:", np.round(decision.load.data, 2))
    print("balance penalty:", float(decision.balance.data))
    print("z penalty:      ", float(z_loss(decision.clean_logits).data))

    out = moe_forward(tokens, decision, params)
    print("mixed output shape:", out.data.shape)
