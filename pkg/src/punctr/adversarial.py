"""Task-adversarial machinery: gradient reversal, the task discriminator,
and the weighted total loss.

The reversal layer sits between pooling and the discriminator. It is the
identity in the forward pass and multiplies the incoming gradient by -lambda
in the backward pass, so discriminator weights always train at full strength
while the shared encoder receives the sign-flipped, lambda-scaled
adversarial gradient. No optimizer special-casing is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError
from .layers import Linear


@dataclass(frozen=True)
class LambdaSchedule:
    """Adversarial loss weight ramp 2 / (1 + exp(-gamma * p)) - 1."""

    gamma: float = 10.0
    progress: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.progress <= 1.0:
            raise ContractError(f"progress must be in [0, 1], got {self.progress}")

    def at(self, progress: float) -> "LambdaSchedule":
        return replace(self, progress=progress)


def lambda_at(schedule: LambdaSchedule, progress: float | None = None) -> float:
    p = schedule.progress if progress is None else progress
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"progress must be in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-schedule.gamma * p)) - 1.0


def grl(tape: Tape, x: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -lambda."""
    if lam < 0.0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    out = Tensor(x.values, requires_grad=x.requires_grad)

    def rule(g):
        if x.requires_grad:
            x.accumulate_grad(-lam * g)

    tape.record(out, (x,), rule)
    return out


class Discriminator:
    """Single-hidden-layer ReLU classifier over pooled shared features."""

    def __init__(self, d_model: int, num_tasks: int = 2, hidden_dim: int = 1024,
                 rng: np.random.Generator | None = None, name: str = "discriminator"):
        if num_tasks < 2:
            raise ContractError(f"need at least two tasks, got {num_tasks}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_tasks = num_tasks
        self.hidden = Linear(d_model, hidden_dim, rng, f"{name}.hidden")
        self.out = Linear(hidden_dim, num_tasks, rng, f"{name}.out")

    def __call__(self, tape: Tape, pooled: Tensor) -> Tensor:
        single = pooled.values.ndim == 1
        if single:
            pooled = ad.reshape(tape, pooled, (1,) + pooled.values.shape)
        logits = self.out(tape, ad.relu(tape, self.hidden(tape, pooled)))
        if single:
            logits = ad.reshape(tape, logits, (self.num_tasks,))
        return logits

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.hidden.parameters() + self.out.parameters()


def adversarial_loss(tape: Tape, pooled: Tensor, task_label: int,
                     discriminator: Discriminator) -> Tensor:
    """Negative log-likelihood of the true task label under the discriminator.

    Accepts a single pooled vector [d] or a batch [B, d] that all carries the
    same task label; the batched form returns the mean over rows.
    """
    if not 0 <= task_label < discriminator.num_tasks:
        raise ContractError(
            f"task label {task_label} out of range [0, {discriminator.num_tasks})"
        )
    logits = discriminator(tape, pooled)
    log_probs = ad.log_softmax(tape, logits, axis=-1)
    if log_probs.values.ndim == 1:
        picked = ad.slice_(tape, log_probs, (task_label,))
        return ad.mul(tape, ad.reshape(tape, picked, ()), -1.0)
    picked = ad.slice_(tape, log_probs, (slice(None), task_label))
    batch = log_probs.values.shape[0]
    return ad.mul(tape, ad.sum_(tape, picked), -1.0 / batch)


def _as_list(x) -> list[Tensor]:
    return list(x) if isinstance(x, (list, tuple)) else [x]


def total_loss(tape: Tape, task_losses, adv_losses, lam: float) -> Tensor:
    """Combined objective value: sum of task losses plus lambda times the sum
    of adversarial losses. This is the reported Eq.-style total; gradient
    routing of the lambda factor is the reversal layer's job."""
    tasks = _as_list(task_losses)
    advs = _as_list(adv_losses)
    acc = tasks[0]
    for t in tasks[1:]:
        acc = ad.add(tape, acc, t)
    adv = advs[0]
    for a in advs[1:]:
        adv = ad.add(tape, adv, a)
    return ad.add(tape, acc, ad.mul(tape, adv, float(lam)))
