"""Optimization: learning-rate schedule, AdamW, the training step and loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import LOSS_NAMES, RunConfig, TrainConfig
from .data import stack
from .model import ModelState, forward_losses, init_model
from .rng import generator
from .tensor import Tensor, backward


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        self.component = component
        super().__init__(f"non-finite loss component {component}: {value}")


class OptimizerError(ValueError):
    pass


def lr_schedule(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return 0.0
    progress = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices and embeddings only."""
    return not (name.endswith(".bias") or name.endswith(".gain") or name == "log_tau")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "AdamState":
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


def optimizer_step(grads: dict, state: ModelState, opt: AdamState, lr: float):
    """One AdamW update in place; decay is multiplicative and decoupled."""
    missing = [name for name in state.params if name not in grads]
    if missing:
        raise OptimizerError(f"no gradient for parameter {missing[0]!r}")
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, p in state.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros(p.shape)
            opt.v[name] = np.zeros(p.shape)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        value = p.data.astype(np.float64)
        if opt.weight_decay and decays(name):
            value *= 1.0 - lr * opt.weight_decay
        p.data[...] = value - update
    state.clamp_tau()


# ------------------------------------------------------------------ one step
@dataclass
class StepMetrics:
    step: int
    total: float
    losses: dict
    lr: float
    tokens: list

    def line(self) -> str:
        parts = [f"step={self.step}", f"loss_total={self.total:.9g}"]
        parts += [f"loss_{n}={self.losses[n]:.9g}" for n in LOSS_NAMES]
        parts += [f"lr={self.lr:.9g}", "tokens=" + ",".join(str(t) for t in self.tokens)]
        return " ".join(parts)


def parse_metrics_line(line: str) -> dict:
    out = {}
    for item in line.split():
        key, _, value = item.partition("=")
        if key == "step":
            out[key] = int(value)
        elif key == "tokens":
            out[key] = [int(v) for v in value.split(",") if v]
        else:
            out[key] = float(value)
    return out


def train_step(batch, state: ModelState, opt: AdamState, step: int, lr: float, coeffs,
               tok_spa_strategy: str = "o2o") -> StepMetrics:
    images, token_ids = batch
    if len(images) < 2:
        raise ValueError("a training batch needs at least two pairs")
    fwd = forward_losses(images, token_ids, state, coeffs, tok_spa_strategy)
    values = {n: float(fwd.losses[n].data) if isinstance(fwd.losses[n], Tensor) else 0.0
              for n in LOSS_NAMES}
    for name in LOSS_NAMES:
        if not math.isfinite(values[name]):
            raise NonFiniteLossError(name, values[name])
    total = float(fwd.total.data)
    if not math.isfinite(total):
        raise NonFiniteLossError("total", total)
    grads = backward(fwd.total, state.params.values())
    optimizer_step(grads, state, opt, lr)
    return StepMetrics(step, total, values, lr, fwd.image.history.acceleration_counts)


# ---------------------------------------------------------------------- loop
@dataclass
class TrainResult:
    state: ModelState
    metrics: list
    epoch_means: list


def train(cfg: RunConfig, pairs, seed: int, out_dir=None, log=None) -> TrainResult:
    """Full training run; writes ``metrics.log`` and one checkpoint per epoch.

    ``log`` is an optional callable receiving each metrics line.
    """
    cfg.validate()
    tc = cfg.train
    state = init_model(cfg.model, seed)
    opt = AdamState.from_config(tc)
    coeffs = cfg.coefficients()
    images, ids = stack(pairs, cfg.model.text.context_length)
    n = len(images)
    if n < 2:
        raise ValueError("training needs at least two pairs")
    per_epoch = n // tc.batch_size if n >= tc.batch_size else 1
    batch = min(tc.batch_size, n)
    total = per_epoch * tc.epochs
    if tc.warmup_steps >= total:
        raise ValueError(f"warmup ({tc.warmup_steps}) must be shorter than the run ({total} steps)")
    shuffle = generator(seed, "shuffle")

    out = Path(out_dir) if out_dir is not None else None
    handle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handle = open(out / "metrics.log", "a", encoding="utf-8")
    metrics, epoch_means, step = [], [], 0
    try:
        for epoch in range(tc.epochs):
            order = shuffle.permutation(n)
            totals = []
            for k in range(per_epoch):
                idx = order[k * batch:(k + 1) * batch]
                lr = lr_schedule(step, tc.peak_lr, tc.warmup_steps, total)
                m = train_step((images[idx], ids[idx]), state, opt, step, lr, coeffs,
                               cfg.loss.tok_spa_strategy)
                metrics.append(m)
                totals.append(m.total)
                line = m.line()
                if handle is not None:
                    handle.write(line + "\n")
                if log is not None:
                    log(line)
                step += 1
            epoch_means.append(float(np.mean(totals)))
            if out is not None:
                handle.flush()
                save_checkpoint(state, out / f"epoch{epoch + 1:03d}.ckpt")
        if out is not None:
            save_checkpoint(state, out / "final.ckpt")
    finally:
        if handle is not None:
            handle.close()
    return TrainResult(state, metrics, epoch_means)
