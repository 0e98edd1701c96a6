"""Full model assembly: wavelet feature block -> channel embedding ->
mixture of sequence experts -> classification head.

All parameters are built deterministically from a config and a seed and are
addressable by name for the optimizer, checkpoints and the counters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .head import HeadParams, classify_patch, init_head_params
from .moe import GateDecision, MoeParams, gate, moe_forward
from .ops import channel_collapse
from .ssm import MambaBlockParams, SsmCore, init_mamba_params
from .tensor import Tensor
from .wtfm import WtfmParams, init_wtfm_params, wtfm_forward


@dataclass
class ModelConfig:
    window: int = 64  # patch length (scan axis)
    channels: int = 128  # electrode count V
    classes: int = 8
    d_model: int = 128
    state_dim: int = 16
    conv_width: int = 4
    expand: int = 4
    n_experts: int = 2
    top_k: int = 2
    moe_layers: int = 1
    wtfm_channels: int = 8
    chan_embed: int = 8
    attn_reduction: int = 0  # 0 -> wtfm_channels // 2
    lambda_balance: float = 0.01
    lambda_z: float = 0.001

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.channels < 4:
            raise ConfigError("need at least 4 channels")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError("top_k out of range")
        if self.window % 2 or self.channels % 2:
            raise ConfigError("window and channel count must be even")
        if self.moe_layers < 1:
            raise ConfigError("need at least one expert layer")

    @property
    def reduction(self) -> int:
        return self.attn_reduction or max(self.wtfm_channels // 2, 1)

    @property
    def fused_channels(self) -> int:
        return 2 * self.wtfm_channels + self.chan_embed

    @staticmethod
    def paper_default() -> "ModelConfig":
        return ModelConfig()

    @staticmethod
    def desk() -> "ModelConfig":
        """Small configuration for minutes-scale CPU training."""
        return ModelConfig(
            channels=16,
            d_model=24,
            state_dim=4,
            expand=2,
            top_k=1,
            wtfm_channels=3,
            chan_embed=2,
        )

    def to_dict(self) -> dict:
        return asdict(self)


class GestureModel:
    """Trainable classifier over normalized (L, V) signal patches."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x90DE1]))
        c = config
        self.wtfm = init_wtfm_params(rng, c.wtfm_channels, c.chan_embed, c.reduction)
        self.embed_mix = Tensor(
            rng.standard_normal(c.fused_channels) / np.sqrt(c.fused_channels),
            requires_grad=True,
        )
        self.embed_w = Tensor(
            rng.standard_normal((c.channels, c.d_model)) / np.sqrt(c.channels),
            requires_grad=True,
        )
        self.embed_b = Tensor(np.zeros(c.d_model), requires_grad=True)
        self.moe_layers = []
        for _ in range(c.moe_layers):
            experts = [
                init_mamba_params(rng, c.d_model, c.state_dim, c.conv_width, c.expand)
                for _ in range(c.n_experts)
            ]
            self.moe_layers.append(
                MoeParams(
                    experts=experts,
                    w_gate=Tensor(np.zeros((c.d_model, c.n_experts)), requires_grad=True),
                    w_noise=Tensor(np.zeros((c.d_model, c.n_experts)), requires_grad=True),
                    k=c.top_k,
                    lambda_balance=c.lambda_balance,
                    lambda_z=c.lambda_z,
                )
            )
        self.head = init_head_params(rng, c.d_model, c.classes)

    # -- parameter registry -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            "wtfm.small_kernels": self.wtfm.small_kernels,
            "wtfm.large_kernels": self.wtfm.large_kernels,
            "wtfm.attn_w1": self.wtfm.attn_w1,
            "wtfm.attn_w2": self.wtfm.attn_w2,
            "wtfm.value_kernel": self.wtfm.value_kernel,
            "embed.mix": self.embed_mix,
            "embed.w": self.embed_w,
            "embed.b": self.embed_b,
        }
        for li, layer in enumerate(self.moe_layers):
            base = f"moe{li}"
            params[f"{base}.w_gate"] = layer.w_gate
            params[f"{base}.w_noise"] = layer.w_noise
            for i, ex in enumerate(layer.experts):
                eb = f"{base}.expert{i}"
                params[f"{eb}.in_proj"] = ex.in_proj
                params[f"{eb}.conv_kernel"] = ex.conv_kernel
                params[f"{eb}.a_log"] = ex.core.a_log
                params[f"{eb}.w_b"] = ex.core.w_b
                params[f"{eb}.w_c"] = ex.core.w_c
                params[f"{eb}.w_delta"] = ex.core.w_delta
                params[f"{eb}.d_skip"] = ex.core.d_skip
                params[f"{eb}.out_proj"] = ex.out_proj
        params["head.norm_gain"] = self.head.norm_gain
        params["head.norm_bias"] = self.head.norm_bias
        params["head.projection"] = self.head.projection
        params["head.bias"] = self.head.bias
        return params

    # -- forward ------------------------------------------------------------

    def embed(self, patches: Tensor) -> Tensor:
        """Fused features -> per-step tokens (B, L, D_model)."""
        z = wtfm_forward(patches, self.wtfm)  # (B, C, L, V)
        zc = channel_collapse(z, self.embed_mix)  # (B, L, V)
        tokens = tn.matmul(zc, self.embed_w)
        bias = tn.expand(tn.reshape(self.embed_b, (1, 1, -1)), tokens.shape)
        return tn.add(tokens, bias)

    def forward(
        self,
        patches: np.ndarray | Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ):
        """Per-patch class probabilities plus the gate decisions.

        Returns ``(probs (B, G), decisions)`` with one GateDecision per
        expert layer.
        """
        p = patches if isinstance(patches, Tensor) else Tensor(patches)
        if p.ndim == 2:
            p = tn.reshape(p, (1,) + p.shape)
        tokens = self.embed(p)
        decisions: list[GateDecision] = []
        for layer in self.moe_layers:
            pooled = tn.tmean(tokens, axis=1)  # (B, D_model)
            decision = gate(pooled, layer, training=training, rng=rng)
            tokens = moe_forward(tokens, decision, layer)
            decisions.append(decision)
        pooled_out = tn.tmean(tokens, axis=1)
        probs = classify_patch(pooled_out, self.head)
        return probs, decisions
