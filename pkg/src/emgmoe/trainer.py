"""Training loop: combined loss, Adam with cosine annealing, gradient
clipping, seeded determinism, checkpoints, evaluation, and parameter/FLOP
counters."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tn
from .errors import ConfigError, FormatError, NumericalError
from .head import EvalReport, confusion_and_accuracy, majority_vote, roc_auc
from .model import GestureModel, ModelConfig
from .sigproc import DatasetSplit, PatchSet
from .tensor import Tensor, active_tape, backward, no_grad

# Published reference footprint for the full-size configuration, used by the
# counter comparison mode.
REFERENCE_PARAM_COUNT = 455_003
REFERENCE_FLOP_COUNT = 27_312_144


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-4
    lr_min: float = 0.0
    seed: int = 0
    clip_norm: float = 1.0  # 0 disables clipping
    val_every: int = 5  # validate every N epochs (the last epoch always is)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr0 <= 0:
            raise ConfigError("epochs and batch_size must be >= 1, lr0 > 0")
        if self.val_every < 1:
            raise ConfigError("val_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    load_share: tuple
    batch_losses: list = field(default_factory=list, repr=False)


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr0 (step 0) to lr_min (step == total)."""
    if total <= 0:
        return lr0
    frac = min(max(step / total, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))


def total_loss(probs: Tensor, labels: np.ndarray, aux=None, lambda_z: float = 0.0) -> Tensor:
    """Cross-entropy plus the gate's auxiliary losses.

    ``aux`` is an iterable of (balance, z) pairs; balance terms arrive
    already scaled, the z terms are scaled by ``lambda_z`` here.
    """
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(labels.size), labels]
    loss = tn.neg(tn.tmean(tn.log(picked)))
    for balance, z in aux or ():
        loss = tn.add(loss, balance)
        if lambda_z:
            loss = tn.add(loss, tn.mul(z, lambda_z))
    return loss


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Never changes the gradient direction. Returns the pre-clip norm.
    """
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.sum(p.grad**2))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# data plumbing


def stack_patchsets(patchsets: list[PatchSet]):
    """Concatenate patch sets into (X, labels, source_ids)."""
    x = np.concatenate([ps.patches for ps in patchsets], axis=0)
    y = np.concatenate([ps.labels for ps in patchsets], axis=0)
    sids = np.concatenate([ps.source_ids for ps in patchsets], axis=0)
    return x, y, sids


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


_SHUFFLE, _NOISE = 0x5F0F, 0x401E


# ---------------------------------------------------------------------------
# training


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    split: DatasetSplit,
    resume: str | None = None,
    log=None,
):
    """Run the full loop; deterministic for a fixed seed.

    Returns ``(model, history, state)`` where ``state`` carries the optimizer
    and rng streams for checkpointing.
    """
    x_train, y_train, _ = stack_patchsets(split.train)
    x_val, y_val, _ = stack_patchsets(split.test) if split.test else (None, None, None)
    n = x_train.shape[0]
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch

    if resume is not None:
        model, train_cfg, opt, start_epoch, shuffle_rng, noise_rng = _restore(resume, model_cfg)
        history: list[EpochStats] = []
    else:
        model = GestureModel(model_cfg, seed=train_cfg.seed)
        opt = Adam(train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
        shuffle_rng = _stream(train_cfg.seed, _SHUFFLE)
        noise_rng = _stream(train_cfg.seed, _NOISE)
        start_epoch = 0
        history = []

    params = model.named_parameters()
    tape = active_tape()
    for epoch in range(start_epoch, train_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        losses, correct = [], 0
        share_sum = np.zeros(model_cfg.n_experts)
        lr = train_cfg.lr0
        for b in range(steps_per_epoch):
            idx = perm[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            tape.clear()
            for p in params.values():
                p.zero_grad()
            probs, decisions = model.forward(xb, training=True, rng=noise_rng)
            loss = total_loss(
                probs, yb, [d.aux_losses for d in decisions], lambda_z=model_cfg.lambda_z
            )
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                norms = {k: float(np.linalg.norm(p.data)) for k, p in params.items()}
                worst = sorted(norms, key=norms.get, reverse=True)[:5]
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b}; "
                    f"largest parameter norms: "
                    + ", ".join(f"{k}={norms[k]:.3g}" for k in worst)
                )
            backward(loss)
            clip_gradients(params, train_cfg.clip_norm)
            lr = cosine_lr(epoch * steps_per_epoch + b, total_steps, train_cfg.lr0, train_cfg.lr_min)
            opt.step(params, lr)
            losses.append(loss_val)
            correct += int((probs.data.argmax(axis=1) == yb).sum())
            share_sum += decisions[0].weights.data.mean(axis=0)
        tape.clear()
        validate = (epoch + 1) % train_cfg.val_every == 0 or epoch == train_cfg.epochs - 1
        val_acc = (
            patch_accuracy(model, x_val, y_val)
            if x_val is not None and validate
            else float("nan")
        )
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            train_acc=correct / n,
            val_acc=val_acc,
            load_share=tuple(share_sum / steps_per_epoch),
            batch_losses=losses,
        )
        history.append(stats)
        if log is not None:
            log(
                f"epoch {epoch:3d}  loss {stats.train_loss:.4f}  "
                f"train_acc {stats.train_acc:.3f}  val_acc {stats.val_acc:.3f}"
            )
    state = {"optimizer": opt, "shuffle_rng": shuffle_rng, "noise_rng": noise_rng}
    return model, history, state


def predict_probs(model: GestureModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode per-patch probabilities, batched."""
    out = []
    tape = active_tape()
    with no_grad():
        for i in range(0, x.shape[0], batch_size):
            probs, _ = model.forward(x[i : i + batch_size], training=False)
            out.append(probs.data.copy())
    tape.clear()
    return np.concatenate(out, axis=0)


def patch_accuracy(model: GestureModel, x: np.ndarray, y: np.ndarray) -> float:
    probs = predict_probs(model, x)
    return float((probs.argmax(axis=1) == y).mean())


def evaluate(model: GestureModel, patchsets: list[PatchSet]) -> EvalReport:
    """Patch- and signal-level metrics over held-out patch sets."""
    x, y, sids = stack_patchsets(patchsets)
    g = model.config.classes
    probs = predict_probs(model, x)
    _, patch_total, patch_balanced = confusion_and_accuracy(probs.argmax(axis=1), y, g)

    votes = majority_vote(probs, sids)
    sig_ids = sorted(votes)
    sig_labels = []
    sig_scores = np.zeros((len(sig_ids), g))
    for i, sid in enumerate(sig_ids):
        mask = sids == sid
        sig_labels.append(int(y[mask][0]))
        sig_scores[i] = probs[mask].mean(axis=0)
    sig_preds = [votes[sid] for sid in sig_ids]
    confusion, total, balanced = confusion_and_accuracy(sig_preds, sig_labels, g)

    aucs, roc_points = [], {}
    for cls in range(g):
        auc, pts = roc_auc(sig_scores, np.asarray(sig_labels), cls)
        aucs.append(auc)
        if pts:
            roc_points[cls] = pts
    return EvalReport(
        confusion=confusion,
        per_class_auc=aucs,
        total_accuracy=total,
        balanced_accuracy=balanced,
        patch_accuracy=patch_total,
        patch_balanced_accuracy=patch_balanced,
        param_count=count_params(model),
        flop_count=count_flops(model.config),
        roc_points=roc_points,
    )


def history_to_csv(history: list[EpochStats], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        n_exp = len(history[0].load_share) if history else 0
        writer.writerow(
            ["epoch", "lr", "train_loss", "train_acc", "val_acc"]
            + [f"load_share_{i}" for i in range(n_exp)]
        )
        for h in history:
            writer.writerow(
                [h.epoch, f"{h.lr:.8g}", f"{h.train_loss:.8g}", f"{h.train_acc:.6f}",
                 f"{h.val_acc:.6f}"] + [f"{s:.6f}" for s in h.load_share]
            )


# ---------------------------------------------------------------------------
# counters


def count_params(model: GestureModel) -> int:
    """Exact learnable parameter count by summation."""
    return sum(p.size for p in model.named_parameters().values())


def count_flops(cfg: ModelConfig) -> int:
    """Analytic FLOPs for one forward pass of one patch.

    Conventions: one multiply-accumulate = 2 FLOPs; matmul m,k,p costs 2mkp;
    conv costs 2*C_in*C_out*k_h*k_w*H*W; the selective scan costs 9*T*D*N.
    Only the ``top_k`` experts actually dispatched are counted.
    """
    L, V = cfg.window, cfg.channels
    E, EC = cfg.wtfm_channels, cfg.chan_embed
    D, N = cfg.d_model, cfg.state_dim
    DI = cfg.expand * cfg.d_model
    r = cfg.reduction
    flops = 0
    # feature block
    flops += 2 * 1 * E * 9 * L * V  # 3x3 path
    flops += 2 * 1 * E * 49 * L * V  # 7x7 path
    flops += 2 * 1 * EC * 1 * L * V  # value embedding
    flops += 4 * (2 * r * E + 2 * E * r)  # channel attention, four bands
    # channel mixing + token embedding
    flops += 2 * cfg.fused_channels * 1 * L * V
    flops += 2 * L * V * D
    per_layer = 0
    per_expert = 0
    per_expert += 2 * L * D * 2 * DI  # in_proj
    per_expert += 2 * DI * cfg.conv_width * L  # depthwise conv
    per_expert += 2 * (2 * L * DI * N + L * DI)  # selective B/C/step projections
    per_expert += 9 * L * DI * N  # scan
    per_expert += 2 * L * DI * D  # out_proj
    per_layer += cfg.top_k * per_expert
    per_layer += 2 * 2 * D * cfg.n_experts  # gate + noise projections
    flops += cfg.moe_layers * per_layer
    flops += 2 * D * cfg.classes  # head projection
    return flops


# ---------------------------------------------------------------------------
# checkpoints (magic MEMC)

_CK_MAGIC = b"MEMC"
_CK_VERSION = 1


def save_checkpoint(path, model: GestureModel, train_cfg: TrainConfig, epoch: int, state: dict):
    """Versioned binary checkpoint: config echo, named tensors, optimizer
    moments and rng streams; a resumed run reproduces the uninterrupted one
    step for step."""
    opt: Adam = state["optimizer"]
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "epoch": epoch,
        "adam_t": opt.t,
        "rng": {
            "shuffle": state["shuffle_rng"].bit_generator.state,
            "noise": state["noise_rng"].bit_generator.state,
        },
    }
    blob = json.dumps(meta).encode()
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters().items():
        tensors.append((name, p.data))
        if name in opt.m:
            tensors.append((f"adam.m.{name}", opt.m[name]))
            tensors.append((f"adam.v.{name}", opt.v[name]))
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<II", _CK_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, train_cfg, epoch, state) ready to resume or evaluate."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _CK_MAGIC:
        raise FormatError("not a MEMC checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != _CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = 12
    try:
        meta = json.loads(blob[offset : offset + meta_len])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    offset += meta_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        if offset + 2 > len(blob):
            raise FormatError("truncated checkpoint")
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + nlen].decode()
        offset += nlen
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        tensors[name] = arr.reshape(shape).copy()

    model_cfg = ModelConfig(**meta["model_config"])
    train_cfg = TrainConfig(**meta["train_config"])
    model = GestureModel(model_cfg, seed=train_cfg.seed)
    opt = Adam(train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    opt.t = meta["adam_t"]
    for name, p in model.named_parameters().items():
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != p.shape:
            raise FormatError(f"checkpoint tensor {name} has shape {tensors[name].shape}")
        p.data = tensors[name]
        if f"adam.m.{name}" in tensors:
            opt.m[name] = tensors[f"adam.m.{name}"]
            opt.v[name] = tensors[f"adam.v.{name}"]
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
    noise_rng = np.random.default_rng()
    noise_rng.bit_generator.state = meta["rng"]["noise"]
    state = {"optimizer": opt, "shuffle_rng": shuffle_rng, "noise_rng": noise_rng}
    return model, train_cfg, meta["epoch"], state


def _restore(path, expected_cfg: ModelConfig):
    model, train_cfg, epoch, state = load_checkpoint(path)
    if expected_cfg is not None and model.config.to_dict() != expected_cfg.to_dict():
        raise ConfigError("checkpoint model config does not match the requested one")
    return model, train_cfg, state["optimizer"], epoch, state["shuffle_rng"], state["noise_rng"]
