"""Stage-1 consistency training of the phi_c adapters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import StorySequence, make_group_batches
from .flow import loss_stage1
from .optim import AdamW
from .tensor import ContractError


@dataclass
class Stage1Step:
    step: int
    loss: float


def train_stage1(
    model,
    dataset: Sequence[StorySequence],
    steps: int,
    rng: np.random.Generator,
    lr: float = 1e-4,
    batch_size: int = 4,
    group_size: int = 3,
    caption_dropout: float = 0.1,
    use_references: bool = True,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
    on_step: Optional[Callable[[Stage1Step], None]] = None,
) -> list[Stage1Step]:
    """Train ``phi_c`` with the base frozen and ``phi_d`` switched off.

    Each step averages the flow-matching loss over ``batch_size`` group
    batches. With ``use_references=False`` the same stream is drawn but the
    reference cache is never built, giving the single-sample control.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if not any(len(seq.frames) >= group_size for seq in dataset):
        raise ContractError(f"no story in the dataset has group_size={group_size} frames")
    ad = model.adapters
    ad.set_trainable("phi_d", False)
    ad.set_active("phi_d", False)
    ad.set_active("phi_c", True)
    ad.set_trainable("phi_c", True)
    opt = AdamW(ad.parameters("phi_c"), lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    stream = make_group_batches(dataset, group_size, rng, caption_dropout)
    history = []
    for step in range(1, steps + 1):
        batches = [next(stream) for _ in range(batch_size)]
        with T.Tape() as tape:
            loss = loss_stage1(model, batches, use_references=use_references)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite stage-1 loss at step {step}")
        tape.backward(loss)
        opt.step()
        rec = Stage1Step(step, value)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    ad.set_trainable("phi_c", False)
    return history
