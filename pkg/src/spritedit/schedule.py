"""Diffusion noise schedules.

A schedule is the sequence alpha[0..T] of cumulative signal fractions: a clean
image carries alpha[t] of its variance at step t and (1 - alpha[t]) noise.
Both endpoints are pinned exactly: alpha[0] = 1 (clean) and alpha[T] = 0
(pure noise), with the sequence strictly decreasing in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int
    alphas: torch.Tensor = field(repr=False)  # shape (num_steps + 1,), float64

    def __post_init__(self):
        if self.alphas.shape != (self.num_steps + 1,):
            raise ValueError(
                f"alphas must have {self.num_steps + 1} entries, got {tuple(self.alphas.shape)}"
            )
        if self.alphas[0] != 1.0 or self.alphas[-1] != 0.0:
            raise ValueError("schedule endpoints must be exactly alpha[0]=1, alpha[T]=0")
        if not bool((self.alphas[1:] < self.alphas[:-1]).all()):
            raise ValueError("alphas must be strictly decreasing")

    def alpha(self, t: int) -> float:
        """Cumulative signal fraction at step t."""
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"t={t} outside [0, {self.num_steps}]")
        return float(self.alphas[t])


_SNR_SHIFT = 2.0 * math.log(16.0 / 64.0)  # shifted-cosine reference: 64px


def make_schedule(num_steps: int, shape: str = "shifted-cosine") -> DiffusionSchedule:
    """Build an alpha schedule of the given shape.

    linear: alpha decays as 1 - t/T.
    cosine: alpha = cos^2 of a shifted ramp.
    shifted-cosine: cosine with the log-SNR lowered by 2*log(16/64). At 16px,
    plain cosine leaves global content readable from pixels for almost the
    whole chain, so conditioning on low-frequency attributes never gets
    training signal; shifting the SNR down restores it. Endpoints are forced
    to exactly 1 and 0 after the shape is evaluated.
    """
    if num_steps < 2:
        raise ValueError(f"num_steps must be >= 2, got {num_steps}")
    t = torch.arange(num_steps + 1, dtype=torch.float64)
    if shape == "linear":
        alphas = 1.0 - t / num_steps
    elif shape in ("cosine", "shifted-cosine"):
        s = 0.008
        ramp = (t / num_steps + s) / (1 + s) * (math.pi / 2)
        alphas = ramp.cos().pow(2) / math.cos(s / (1 + s) * math.pi / 2) ** 2
        if shape == "shifted-cosine":
            logsnr = (alphas.clamp(1e-12, 1 - 1e-12).logit()) + _SNR_SHIFT
            alphas = logsnr.sigmoid()
    else:
        raise ValueError(f"unknown schedule shape {shape!r}")
    alphas[0] = 1.0
    alphas[-1] = 0.0
    return DiffusionSchedule(num_steps=num_steps, alphas=alphas)
