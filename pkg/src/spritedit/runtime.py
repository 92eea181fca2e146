"""Process-level torch tuning for entry points.

The models here are small enough that intra-op threading costs more than it
saves (roughly 2.5x slower on a 2-core box), so entry points pin torch to one
thread and rely on coarse parallelism (concurrent fine-tunes, parallel render
workers) instead.
"""

from __future__ import annotations

import torch


def tune_for_small_models(num_threads: int = 1) -> None:
    torch.set_num_threads(num_threads)
