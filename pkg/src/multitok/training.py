"""Three-learning-rate training for the multi-head model.

The base parameters (stem, head 1, embeddings) learn from the head-1 loss
at lr_b, the fresh head layers learn from their own losses at lr_m, and
the gradients those losses push back into the base parameters are applied
at lr_mb. Realized by scaling the cross-stream gradient by lr_mb/lr_b and
stepping the base group at lr_b, which reproduces the per-stream update
exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .model import MultiHeadModel

__all__ = [
    "TrainingConfig",
    "TrainingReport",
    "TrainingDiverged",
    "AdamW",
    "lr_schedule",
    "three_rate_sgd_step",
    "train",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the partial report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainingConfig:
    lr_b: float = 1e-3
    lr_m: float = 1e-2
    lr_mb: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_frac: float = 0.01
    steps: int = 500
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 100
    eval_sequences: int = 32

    def __post_init__(self):
        if not self.lr_mb < self.lr_b < self.lr_m:
            raise ValueError("learning rates must satisfy lr_mb < lr_b < lr_m")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


@dataclass
class TrainingReport:
    step_losses: list = field(default_factory=list)  # one (n_heads,) array per step
    val_history: list = field(default_factory=list)  # (step, per-head log-perplexity)
    wall_clock_s: float = 0.0

    @property
    def initial_losses(self) -> np.ndarray:
        return self.step_losses[0]

    @property
    def final_losses(self) -> np.ndarray:
        return self.step_losses[-1]


def lr_schedule(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup for warmup_frac of training, then cosine decay to 0."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return 0.5 * (1.0 + np.cos(np.pi * min(progress, 1.0)))


def _effective_grads(model: MultiHeadModel, g_base, g_cross, g_new, cfg: TrainingConfig):
    """Fold the three gradient streams into one per-parameter dict.

    Base parameters receive g_base + (lr_mb/lr_b) * g_cross and step at
    lr_b; new head parameters step at lr_m with their own gradients.
    """
    scale = cfg.lr_mb / cfg.lr_b
    eff = {}
    rates = {}
    for name in model.base_param_names():
        g = g_base.get(name)
        gx = g_cross.get(name)
        if g is None and gx is None:
            continue
        if g is None:
            g = np.zeros_like(model.params[name])
        eff[name] = g + scale * gx if gx is not None else g
        rates[name] = cfg.lr_b
    for name in model.new_param_names():
        if name in g_new:
            eff[name] = g_new[name]
            rates[name] = cfg.lr_m
    return eff, rates


def three_rate_sgd_step(model: MultiHeadModel, g_base, g_cross, g_new, cfg: TrainingConfig, lr_scale: float = 1.0):
    """Plain SGD realization of the three-rate update (used by contract tests)."""
    eff, rates = _effective_grads(model, g_base, g_cross, g_new, cfg)
    for name, g in eff.items():
        model.params[name] -= lr_scale * rates[name] * g


class AdamW:
    """AdamW over the folded gradient streams with per-group learning rates."""

    def __init__(self, model: MultiHeadModel, cfg: TrainingConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, model: MultiHeadModel, g_base, g_cross, g_new, lr_scale: float = 1.0):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        eff, rates = _effective_grads(model, g_base, g_cross, g_new, cfg)
        for name, g in eff.items():
            lr = lr_scale * rates[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            if cfg.weight_decay:
                model.params[name] -= lr * cfg.weight_decay * model.params[name]
            model.params[name] -= lr * update


def _validation_log_ppl(model: MultiHeadModel, validation, limit: int) -> np.ndarray:
    subset = [s for s in validation[:limit] if s.size >= model.config.n_heads + 1]
    if not subset:
        return np.full(model.config.n_heads, np.nan)
    return model.losses(subset)


def train(model: MultiHeadModel, split, cfg: TrainingConfig) -> TrainingReport:
    """Run the training loop in place; returns the per-step report."""
    rng = np.random.default_rng(cfg.seed)
    report = TrainingReport()
    usable = [s for s in split.train if s.size >= model.config.n_heads + 1]
    if not usable:
        raise ValueError("training split holds no usable sequences")
    start = time.perf_counter()
    opt = AdamW(model, cfg)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(usable), size=cfg.batch_size)
        batch = [usable[i] for i in idx]
        losses, g_base, g_cross, g_new = model.loss_and_grads(batch)
        report.step_losses.append(losses)
        if not np.isfinite(losses).all():
            report.wall_clock_s = time.perf_counter() - start
            raise TrainingDiverged(f"non-finite loss at step {step}: {losses}", report)
        opt.step(model, g_base, g_cross, g_new, lr_scale=lr_schedule(step, cfg.steps, cfg.warmup_frac))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            val = _validation_log_ppl(model, split.validation, cfg.eval_sequences)
            report.val_history.append((step + 1, val))
            log.info("step %d: train %s, val log-ppl %s", step + 1, np.round(losses, 4), np.round(val, 4))
    report.wall_clock_s = time.perf_counter() - start
    return report
