"""Selective state-space sequence block: input-dependent discretization and
linear-time scan wrapped with projections, a causal depthwise convolution,
gating and a residual connection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ShapeError
from .ops import conv1d_depthwise, selective_scan as _scan_op, zoh_discretize
from .tensor import Tensor

__all__ = [
    "SsmCore",
    "MambaBlockParams",
    "init_ssm_core",
    "init_mamba_params",
    "zoh_discretize",
    "selective_params",
    "selective_scan",
    "mamba_block",
]


@dataclass
class SsmCore:
    """Diagonal state transition (negative-real parameterized) plus the
    selective projections for B, C and the step size."""

    a_log: Tensor  # (D, N); transition A = -exp(a_log)
    w_b: Tensor  # (N, D)
    w_c: Tensor  # (N, D)
    w_delta: Tensor  # (D,) scalar step projection, broadcast across channels
    d_skip: Tensor  # (D,) direct feedthrough

    @property
    def dim(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]


@dataclass
class MambaBlockParams:
    in_proj: Tensor  # (D_model, 2*D_inner): signal and gate branches
    conv_kernel: Tensor  # (D_inner, width) depthwise, causal
    core: SsmCore
    out_proj: Tensor  # (D_inner, D_model)

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def d_inner(self) -> int:
        return self.core.dim


def init_ssm_core(rng: np.random.Generator, dim: int, state_dim: int) -> SsmCore:
    # negative-reciprocal ladder a_n = -(n+1), shared across channels at init
    a_log = np.tile(np.log(np.arange(1, state_dim + 1)), (dim, 1))
    scale = 1.0 / np.sqrt(dim)
    return SsmCore(
        a_log=Tensor(a_log, requires_grad=True),
        w_b=Tensor(rng.standard_normal((state_dim, dim)) * scale, requires_grad=True),
        w_c=Tensor(rng.standard_normal((state_dim, dim)) * scale, requires_grad=True),
        w_delta=Tensor(rng.standard_normal(dim) * scale, requires_grad=True),
        d_skip=Tensor(np.ones(dim), requires_grad=True),
    )


def init_mamba_params(
    rng: np.random.Generator,
    d_model: int,
    state_dim: int = 16,
    conv_width: int = 4,
    expand: int = 4,
) -> MambaBlockParams:
    d_inner = expand * d_model
    return MambaBlockParams(
        in_proj=Tensor(
            rng.standard_normal((d_model, 2 * d_inner)) / np.sqrt(d_model),
            requires_grad=True,
        ),
        conv_kernel=Tensor(
            rng.standard_normal((d_inner, conv_width)) / np.sqrt(conv_width),
            requires_grad=True,
        ),
        core=init_ssm_core(rng, d_inner, state_dim),
        out_proj=Tensor(
            rng.standard_normal((d_inner, d_model)) / np.sqrt(d_inner),
            requires_grad=True,
        ),
    )


def selective_params(x_t: Tensor, core: SsmCore):
    """Input-dependent (S_B, S_C, S_Delta) for a single step vector (D,)."""
    col = tn.reshape(x_t, (x_t.shape[0], 1))
    s_b = tn.reshape(tn.matmul(core.w_b, col), (core.state_dim,))
    s_c = tn.reshape(tn.matmul(core.w_c, col), (core.state_dim,))
    row = tn.reshape(core.w_delta, (1, core.dim))
    scalar = tn.matmul(row, col)  # (1, 1)
    s_delta = tn.softplus(tn.expand(tn.reshape(scalar, (1,)), (core.dim,)))
    return s_b, s_c, s_delta


def selective_scan(x: Tensor, core: SsmCore) -> Tensor:
    """Linear-time selective recurrence over (T, D) or batched (B, T, D)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1,) + x.shape)
    if x.shape[2] != core.dim:
        raise ShapeError(f"scan: input dim {x.shape[2]} != core dim {core.dim}")
    y = _scan_op(x, core.a_log, core.w_b, core.w_c, core.w_delta, core.d_skip)
    return tn.reshape(y, y.shape[1:]) if squeeze else y


def mamba_block(x: Tensor, params: MambaBlockParams) -> Tensor:
    """Projections -> causal depthwise conv -> selective scan -> gate ->
    output projection, with a residual connection. Shape-preserving."""
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1,) + x.shape)
    d_inner = params.d_inner
    xz = tn.matmul(x, params.in_proj)  # (B, T, 2*D_inner)
    u = xz[:, :, :d_inner]
    g = xz[:, :, d_inner:]
    u = tn.silu(conv1d_depthwise(u, params.conv_kernel, padding="causal"))
    y = selective_scan(u, params.core)
    y = tn.hadamard(y, tn.silu(g))
    out = tn.add(tn.matmul(y, params.out_proj), x)
    return tn.reshape(out, out.shape[1:]) if squeeze else out
