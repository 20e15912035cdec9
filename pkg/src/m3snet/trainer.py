"""Optimization loop: Adam with cosine-annealed learning rate on the
negative-PSNR objective, plus checkpointed evaluation.

Batches are drawn with a per-step generator seeded from (run seed, step),
so the data order never depends on loop history; together with exact
moment checkpoints this makes resuming from any checkpoint reproduce the
uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import tensor as T
from .data import augment, sample_patch
from .metrics import MetricReport, psnr_loss, psnr_metric, ssim_metric
from .model import M3SNet, ModelConfig
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_INIT = 1e-3
LR_FINAL = 1e-7


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss, carrying a diagnostic snapshot."""

    def __init__(self, step, lr, grad_norms):
        worst = sorted(grad_norms.items(), key=lambda kv: -kv[1])[:5]
        detail = ", ".join(f"{k}={v:.3e}" for k, v in worst)
        super().__init__(f"non-finite loss at step={step} lr={lr:.3e}; "
                         f"largest gradient norms: {detail}")
        self.step = step
        self.lr = lr
        self.grad_norms = grad_norms


def cosine_lr(step, total, lr0=LR_INIT, lr1=LR_FINAL):
    """Single-cycle cosine decay from lr0 at step 0 to lr1 at step==total."""
    if total <= 0:
        raise ConfigError(f"total iterations must be > 0, got {total}")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + np.cos(np.pi * step / total))


@dataclass
class TrainState:
    """Everything needed to resume: schedule position, moments, rng seed."""

    total_iters: int
    seed: int = 0
    step: int = 0
    lr0: float = LR_INIT
    lr1: float = LR_FINAL
    best_val_psnr: float = float("-inf")
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure_moments(self, params):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        if name not in grads:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def _step_rng(seed, step):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))


def make_batch(pairs, batch_size, patch_size, rng):
    """Aligned random patches with flip augmentation, stacked BCHW."""
    degraded, clean = [], []
    idx = rng.integers(0, len(pairs), size=batch_size)
    for i in idx:
        pair = augment(sample_patch(pairs[int(i)], size=patch_size, rng=rng), rng)
        degraded.append(pair.degraded)
        clean.append(pair.clean)
    return np.stack(degraded), np.stack(clean)


def split_pairs(pairs, val_frac=0.1):
    """Deterministic head/tail split; at least one validation pair."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("dataset is empty")
    n_val = max(1, int(round(len(pairs) * val_frac))) if len(pairs) > 1 else 0
    return pairs[: len(pairs) - n_val], pairs[len(pairs) - n_val:]


def validation_psnr(model, pairs, tlc_window=None):
    if not pairs:
        return float("nan")
    scores = []
    for pair in pairs:
        restored = model.restore(pair.degraded[None], tlc_window=tlc_window)[0]
        scores.append(psnr_metric(restored, pair.clean))
    return float(np.mean(scores))


def save_checkpoint(path, model, state=None):
    config = model.config.to_dict()
    tensors = {name: p.data for name, p in model.named_params().items()}
    if state is not None:
        config.update({
            "train.step": str(state.step),
            "train.total_iters": str(state.total_iters),
            "train.lr0": repr(state.lr0),
            "train.lr1": repr(state.lr1),
            "train.seed": str(state.seed),
            "train.best_val_psnr": repr(state.best_val_psnr),
        })
        moment_tensors = {}
        for name in state.m:
            moment_tensors[f"adam.m.{name}"] = state.m[name]
            moment_tensors[f"adam.v.{name}"] = state.v[name]
        tensors = {**tensors, **moment_tensors}
    ck.save(path, config, tensors)


def load_checkpoint(path):
    """Rebuild (model, train state or None) from a checkpoint file."""
    config, tensors = ck.load(path)
    model_cfg = ModelConfig.from_dict(config)
    model = M3SNet(model_cfg)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model.load_state(params)
    state = None
    if "train.step" in config:
        state = TrainState(
            total_iters=int(config["train.total_iters"]),
            seed=int(config["train.seed"]),
            step=int(config["train.step"]),
            lr0=float(config["train.lr0"]),
            lr1=float(config["train.lr1"]),
            best_val_psnr=float(config["train.best_val_psnr"]),
            m={k[len("adam.m."):]: v.copy() for k, v in tensors.items()
               if k.startswith("adam.m.")},
            v={k[len("adam.v."):]: v.copy() for k, v in tensors.items()
               if k.startswith("adam.v.")},
        )
    return model, state


@dataclass
class TrainResult:
    checkpoint_path: Path
    state: TrainState
    history: list  # (step, lr, loss, val_psnr) at each validation


def train(model, pairs, state, batch_size=4, patch_size=256, val_frac=0.1,
          out_dir=None, val_every=None, ckpt_every=None, clip_norm=None,
          log_fn=None):
    """Run the loop from state.step to state.total_iters.

    Logs ``step=<n> lr=<float> loss=<float> val_psnr=<float>`` at every
    validation. Checkpoints land in ``out_dir`` every ``ckpt_every`` steps
    and at the end; with no out_dir nothing is written and the final
    checkpoint path is None.
    """
    train_pairs, val_pairs = split_pairs(pairs, val_frac=val_frac)
    if not train_pairs:
        train_pairs = list(pairs)
    params = model.named_params()
    state.ensure_moments(params)
    total = state.total_iters
    if val_every is None:
        val_every = max(total // 20, 100)
    if ckpt_every is None:
        ckpt_every = max(total // 4, 500)
    emit = log_fn if log_fn is not None else lambda line: log.info("%s", line)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    last_loss = float("nan")
    while state.step < total:
        step = state.step  # completed steps so far; this iteration is step+1
        rng = _step_rng(state.seed, step)
        deg, clean = make_batch(train_pairs, batch_size, patch_size, rng)
        lr = cosine_lr(step, total, state.lr0, state.lr1)

        pred = model.forward(Tensor(deg))
        loss = psnr_loss(pred, Tensor(clean))
        last_loss = float(loss.data)
        grads = T.gradients(loss, params)
        if not np.isfinite(last_loss):
            norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
            raise TrainingDiverged(step, lr, norms)
        if clip_norm is not None:
            gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if gnorm > clip_norm:
                factor = clip_norm / gnorm
                grads = {k: g * factor for k, g in grads.items()}
        adam_step(params, grads, state, lr)
        for p in params.values():
            p.zero_grad()

        done = state.step
        if done % val_every == 0 or done == total:
            val = validation_psnr(model, val_pairs)
            if np.isfinite(val) and val > state.best_val_psnr:
                state.best_val_psnr = val
            line = f"step={done} lr={lr:.6e} loss={last_loss:.6f} val_psnr={val:.4f}"
            emit(line)
            history.append((done, lr, last_loss, val))
        if out_dir is not None and (done % ckpt_every == 0 or done == total):
            save_checkpoint(out_dir / f"step_{done:07d}.ckpt", model, state)

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "final.ckpt"
        save_checkpoint(final_path, model, state)
    return TrainResult(final_path, state, history)


def evaluate(model, pairs, tlc=False, channel_mode="rgb"):
    """Full-resolution inference and quantized metrics over a dataset.

    With ``tlc`` the channel-attention pooling switches to local windows
    of the configured training patch size, bridging the patch-training /
    full-image-testing statistics gap.
    """
    window = model.config.tlc_window if tlc else None
    report = MetricReport(channel_mode=channel_mode)
    for pair in pairs:
        restored = model.restore(pair.degraded[None], tlc_window=window)[0]
        report.add(pair.id,
                   psnr_metric(restored, pair.clean, mode=channel_mode),
                   ssim_metric(restored, pair.clean, mode=channel_mode))
    return report
