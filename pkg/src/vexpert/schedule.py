"""Warmup / constant / cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup from 0, a constant plateau at ``peak``, then cosine decay to 0."""

    total: int
    peak: float = 0.002
    warmup_fraction: float = 0.10
    constant_fraction: float = 0.40

    def __post_init__(self):
        if self.total < 1:
            raise ContractError("total steps must be >= 1")
        if self.warmup_fraction < 0 or self.constant_fraction < 0 or \
                self.warmup_fraction + self.constant_fraction > 1:
            raise ContractError("warmup and constant fractions must be >= 0 and sum to <= 1")

    @property
    def warmup_end(self):
        return self.warmup_fraction * self.total

    @property
    def constant_end(self):
        return (self.warmup_fraction + self.constant_fraction) * self.total

    def __call__(self, step):
        return lr_at(self, step)


def lr_at(sched, step):
    if not 0 <= step <= sched.total:
        raise ContractError(f"step {step} outside [0, {sched.total}]")
    if step < sched.warmup_end:
        return sched.peak * step / sched.warmup_end
    if step <= sched.constant_end:
        return sched.peak
    span = sched.total - sched.constant_end
    return 0.5 * sched.peak * (1.0 + math.cos(math.pi * (step - sched.constant_end) / span))
