"""Sparse noisy top-k mixture of sequence experts with balance and z
regularization.

Routing is per patch: each patch's pooled embedding scores the experts, the
top-k survivors are renormalized by softmax, and only the experts with a
nonzero gate weight are evaluated for that patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .ssm import MambaBlockParams, mamba_block
from .tensor import Tensor


@dataclass
class MoeParams:
    experts: list[MambaBlockParams]
    w_gate: Tensor  # (D_model, n_experts)
    w_noise: Tensor  # (D_model, n_experts)
    k: int = 2
    lambda_balance: float = 0.01
    lambda_z: float = 0.001

    def __post_init__(self):
        eta = len(self.experts)
        if not 1 <= self.k <= eta:
            raise ConfigError(f"top-k {self.k} out of range for {eta} experts")
        if self.w_gate.shape != self.w_noise.shape:
            raise ShapeError("gate and noise matrices must share shape")
        if self.w_gate.shape[1] != eta:
            raise ShapeError(f"gate matrix covers {self.w_gate.shape[1]} experts, have {eta}")

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class GateDecision:
    weights: Tensor  # (M, n_experts), <= k nonzeros per row summing to 1
    load: Tensor  # (n_experts,) smooth load estimate (training) or hard counts
    balance: Tensor  # scalar, already scaled by lambda_balance
    z: Tensor  # scalar, unscaled log-partition penalty
    clean_logits: Tensor = field(repr=False, default=None)

    @property
    def aux_losses(self):
        return self.balance, self.z


def z_loss(gate_logits: Tensor) -> Tensor:
    """Mean squared log-partition of the gate logits (overflow-safe)."""
    lse = tn.logsumexp(gate_logits, axis=1)
    return tn.tmean(tn.square(lse))


def balance_loss(load: Tensor, lam: float) -> Tensor:
    """lam * CV(load)^2 with the population standard deviation.

    Zero traffic means zero imbalance by convention.
    """
    if np.all(load.data == 0.0):
        return Tensor(0.0)
    mean = tn.tmean(load)
    centered = tn.sub(load, tn.expand(tn.reshape(mean, (1,)), load.shape))
    var = tn.tmean(tn.square(centered))
    return tn.mul(tn.div(var, tn.square(mean)), lam)


def load_estimate(h: Tensor, noise_scales: Tensor, k: int) -> Tensor:
    """Smooth per-expert traffic estimate.

    For each token, expert ``i`` contributes the probability that a normal
    draw centered on its logit with its noise scale would clear the k-th
    largest logit among the other experts. With ``k`` equal to the expert
    count every expert is certainly selected.
    """
    m, eta = h.shape
    if k >= eta:
        return Tensor(np.full(eta, float(m)))
    order = np.argsort(-h.data, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(m)[:, None]
    ranks[rows, order] = np.arange(eta)[None, :]
    # k-th largest among the other experts: overall index k if i is in the
    # top k, else k-1 (computed on current logit values, held fixed)
    thr_col = np.where(ranks < k, order[:, k : k + 1], order[:, k - 1 : k])
    thr = h[rows, thr_col]  # (M, eta), gradient flows to the threshold entry
    arg = tn.div(tn.sub(h, thr), noise_scales)
    return tn.tsum(tn.normal_cdf(arg), axis=0)


def gate(
    tokens: Tensor,
    params: MoeParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> GateDecision:
    """Noisy top-k gate over pooled patch embeddings (M, D_model)."""
    m = tokens.shape[0]
    eta = params.n_experts
    clean = tn.matmul(tokens, params.w_gate)
    sigma = tn.softplus(tn.matmul(tokens, params.w_noise))
    if training:
        if rng is None:
            raise ConfigError("training-mode gate needs an rng for the noise draw")
        eps = Tensor(rng.standard_normal((m, eta)))
        noisy = tn.add(clean, tn.hadamard(sigma, eps))
    else:
        noisy = clean
    # keep the k largest logits per row, suppress the rest to -inf
    order = np.argsort(-noisy.data, axis=1, kind="stable")
    drop = np.ones((m, eta), dtype=bool)
    rows = np.arange(m)[:, None]
    drop[rows, order[:, : params.k]] = False
    weights = tn.softmax(tn.masked_fill(noisy, drop, -np.inf), axis=1)
    if training:
        load = load_estimate(noisy, sigma, params.k)
    else:
        load = Tensor((weights.data > 0.0).sum(axis=0).astype(np.float64))
    return GateDecision(
        weights=weights,
        load=load,
        balance=balance_loss(load, params.lambda_balance),
        z=z_loss(clean),
        clean_logits=clean,
    )


def moe_forward(tokens_seq: Tensor, decision: GateDecision, params: MoeParams) -> Tensor:
    """Weighted combination of expert outputs with sparse dispatch.

    ``tokens_seq`` is (M, T, D_model); experts only see the rows routed to
    them. Returns (M, T, D_model).
    """
    m = tokens_seq.shape[0]
    out = None
    for i, expert in enumerate(params.experts):
        idx = np.nonzero(decision.weights.data[:, i] > 0.0)[0]
        if idx.size == 0:
            continue
        sub = tn.take_rows(tokens_seq, idx)
        y = mamba_block(sub, expert)
        w = decision.weights[idx, np.full(idx.size, i)]
        w = tn.expand(tn.reshape(w, (idx.size, 1, 1)), y.shape)
        contrib = tn.scatter_rows(tn.hadamard(y, w), idx, m)
        out = contrib if out is None else tn.add(out, contrib)
    if out is None:
        raise ShapeError("gate routed no tokens to any expert")
    return out
