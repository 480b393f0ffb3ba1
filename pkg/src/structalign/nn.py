"""Tensor plumbing, AdamW with parameter groups, warmup+cosine schedule and a
finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in float64; torch's autograd is the
reverse-mode engine. Everything that sits on top of it (optimizer, schedule,
gradient verification) lives here.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass
class ParamGroup:
    name: str
    params: List[torch.Tensor]
    peak_lr: float
    weight_decay: float = 0.0
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.peak_lr <= 0:
            raise ValueError(f"group {self.name!r}: peak_lr must be > 0, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"group {self.name!r}: weight_decay must be >= 0")
        if not self.names:
            self.names = [f"{self.name}.{i}" for i in range(len(self.params))]


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )


def lr_at(step: int, schedule: Schedule, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > schedule.total_steps:
        warnings.warn(f"step {step} beyond schedule end {schedule.total_steps}; lr clamped to 0")
        return 0.0
    if step <= schedule.warmup_steps:
        return peak_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(
    groups: Sequence[ParamGroup],
    grads: Sequence[Sequence[Optional[torch.Tensor]]],
    state: Dict[str, Dict[str, torch.Tensor]],
    step: int,
    schedule: Schedule,
    betas: tuple = (0.9, 0.95),
    eps: float = 1e-8,
) -> Dict[str, Dict[str, torch.Tensor]]:
    """One AdamW update with decoupled weight decay, in place on the parameters.

    ``grads[g][k]`` is the gradient of ``groups[g].params[k]``; ``None`` means the
    parameter took no part in the loss and is skipped entirely. ``state`` maps
    parameter names to their first/second moment buffers and is returned updated.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if len(grads) != len(groups):
        raise ValueError(f"got gradients for {len(grads)} groups, expected {len(groups)}")
    beta1, beta2 = betas
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    with torch.no_grad():
        for group, group_grads in zip(groups, grads):
            if len(group_grads) != len(group.params):
                raise ValueError(f"group {group.name!r}: gradient count mismatch")
            lr = lr_at(step, schedule, group.peak_lr)
            for name, p, g in zip(group.names, group.params, group_grads):
                if g is None:
                    continue
                if g.shape != p.shape:
                    raise ValueError(
                        f"gradient shape {tuple(g.shape)} does not match parameter {name} {tuple(p.shape)}"
                    )
                buf = state.get(name)
                if buf is None:
                    buf = {"exp_avg": torch.zeros_like(p), "exp_avg_sq": torch.zeros_like(p)}
                    state[name] = buf
                m, v = buf["exp_avg"], buf["exp_avg_sq"]
                m.mul_(beta1).add_(g, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
                if group.weight_decay:
                    p.mul_(1.0 - lr * group.weight_decay)
                denom = (v / bc2).sqrt_().add_(eps)
                p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for training loops."""

    def __init__(self, groups: Sequence[ParamGroup], schedule: Schedule,
                 betas: tuple = (0.9, 0.95), eps: float = 1e-8):
        self.groups = list(groups)
        self.schedule = schedule
        self.betas = tuple(betas)
        self.eps = eps
        self.state: Dict[str, Dict[str, torch.Tensor]] = {}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        grads = [[p.grad for p in g.params] for g in self.groups]
        adamw_step(self.groups, grads, self.state, self.step_count, self.schedule, self.betas, self.eps)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None

    def current_lrs(self, step: Optional[int] = None) -> Dict[str, float]:
        step = self.step_count if step is None else step
        return {g.name: lr_at(step, self.schedule, g.peak_lr) for g in self.groups}

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "state": {k: {n: t.clone() for n, t in v.items()} for k, v in self.state.items()},
        }

    def load_state_dict(self, payload: dict) -> None:
        self.step_count = int(payload["step_count"])
        self.state = {k: {n: t.clone() for n, t in v.items()} for k, v in payload["state"].items()}


def clip_grad_norm(params: Sequence[torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g * g).sum() for g in grads)).item()
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[ParamGroup],
    epsilon: float = 1e-6,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Up to ``max_coords`` coordinates per tensor are sampled uniformly with a
    seeded generator. Error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    tensors = [p for g in params for p in g.params]
    labels = [f"{g.name}/{n}" for g in params for n in g.names]

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite at the unperturbed point")
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if a is None else a.detach() for t, a in zip(tensors, analytic)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for label, t, a in zip(labels, tensors, analytic):
            flat = t.view(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(n, max_coords), replace=False)
            for idx in picks:
                idx = int(idx)
                orig = flat[idx].item()
                flat[idx] = orig + epsilon
                plus = loss_fn().item()
                flat[idx] = orig - epsilon
                minus = loss_fn().item()
                flat[idx] = orig
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise FloatingPointError(f"non-finite loss when perturbing {label}[{idx}]")
                numeric = (plus - minus) / (2.0 * epsilon)
                err = abs(a.view(-1)[idx].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
