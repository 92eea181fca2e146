"""Auxiliary super-resolution diffusion stage.

A second conditional noise predictor working at SR resolution. The
low-resolution image is upsampled (nearest neighbor) and concatenated to the
noisy sample on the channel axis; text conditioning enters through the same
cross-attention path as the base model.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from . import sprites
from .diffusion import SamplerConfig, TrainResult, forward_diffuse, sample, train_model
from .schedule import DiffusionSchedule
from .text import EmbeddingSequence, TextEncoder
from .unet import NoisePredictor, PredictorArch


def sr_arch(base_channels: int = 32, cond_dim: int = 64) -> PredictorArch:
    return PredictorArch(resolution=sprites.SR_RES, in_channels=6,
                         base_channels=base_channels, cond_dim=cond_dim)


def upsample(low: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.interpolate(low[None], scale_factor=factor, mode="nearest")[0]


def downsample(high: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """2x box filter, the inverse convention used across the dataset."""
    c, h, w = high.shape
    return high.reshape(c, h // factor, factor, w // factor, factor).mean(dim=(2, 4))


class _ConcatWrapper(torch.nn.Module):
    """Presents f(x_t ++ low_up) as f(x_t) for the shared training loop."""

    def __init__(self, model: NoisePredictor, low_up_batch: torch.Tensor):
        super().__init__()
        self.model = model
        self.low_up_batch = low_up_batch

    def forward(self, xt, t, cond, mask):
        return self.model(torch.cat([xt, self.low_up_batch[: xt.shape[0]]], dim=1), t, cond, mask)


def train_sr(dataset: sprites.SpriteDataset, model: NoisePredictor, text_encoder: TextEncoder,
             schedule: DiffusionSchedule, steps: int, lr: float, batch_size: int = 16,
             seed: int = 0, log_path=None, split: str = "train",
             cond_drop_prob: float = 0.0, lr_schedule: str = "constant") -> TrainResult:
    """Denoising training on (low, high, caption) triples.

    Low-res conditioning comes from rendering each spec at base resolution;
    the target is the noise added to the SR-resolution render.
    """
    indices = dataset.indices(split)
    res = sprites.SR_RES
    high_cache: dict[int, torch.Tensor] = {}
    low_cache: dict[int, torch.Tensor] = {}
    wrapper = _ConcatWrapper(model, torch.zeros(batch_size, 3, res, res))

    def make_batch(step, rng):
        pick = torch.randint(0, len(indices), (batch_size,), generator=rng)
        idx = [indices[int(i)] for i in pick]
        for i in idx:
            if i not in high_cache:
                spec = dataset.specs[i]
                high_cache[i] = sprites.render_sprite(spec, res)
                low_cache[i] = upsample(sprites.render_sprite(spec, sprites.BASE_RES))
        wrapper.low_up_batch = torch.stack([low_cache[i] for i in idx])
        return torch.stack([high_cache[i] for i in idx]), [dataset.caption(i) for i in idx]

    result = train_model(dataset, wrapper, text_encoder, schedule, steps=steps, lr=lr,
                         cond_drop_prob=cond_drop_prob, batch_size=batch_size, seed=seed,
                         log_path=log_path, lr_schedule=lr_schedule, make_batch=make_batch)
    return TrainResult(model=model, losses=result.losses, aborted_at=result.aborted_at)


def sr_sample(low: torch.Tensor, e: EmbeddingSequence, model: NoisePredictor,
              config: SamplerConfig, schedule: DiffusionSchedule,
              e_uncond: EmbeddingSequence | None = None) -> torch.Tensor:
    """Full reverse diffusion at SR resolution conditioned on the low-res image."""
    if low.shape[-1] * 2 != sprites.SR_RES or low.shape[-2] * 2 != sprites.SR_RES:
        raise ValueError(f"low-res input must be {sprites.SR_RES // 2}px, got {tuple(low.shape)}")
    cond_image = upsample(low)
    return sample(model, e, e_uncond, config, schedule,
                  shape=(3, sprites.SR_RES, sprites.SR_RES), cond_image=cond_image)


def finetune_sr_single(x_sr: torch.Tensor, e_tgt: EmbeddingSequence, model: NoisePredictor,
                       schedule: DiffusionSchedule, steps: int, lr: float,
                       batch_size: int = 2, seed: int = 0,
                       snapshot_every: int = 250) -> NoisePredictor:
    """Fine-tune the SR model to reconstruct one image from its own downsample."""
    tuned = model.clone()
    if steps == 0:
        return tuned
    opt = torch.optim.Adam(tuned.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    low_up = upsample(downsample(x_sr))
    cond = e_tgt.matrix.detach()[None].expand(batch_size, -1, -1)
    mask = e_tgt.mask[None].expand(batch_size, -1)
    snapshot = None
    for step in range(steps):
        if snapshot_every and step % snapshot_every == 0:
            snapshot = {k: v.clone() for k, v in tuned.state_dict().items()}
        t = torch.randint(1, schedule.num_steps + 1, (batch_size,), generator=rng)
        eps = torch.randn((batch_size, *x_sr.shape), generator=rng)
        xt = forward_diffuse(x_sr[None].expand_as(eps), t, eps, schedule)
        pred = tuned(torch.cat([xt, low_up[None].expand_as(xt)], dim=1), t, cond, mask)
        loss = ((pred - eps) ** 2).mean()
        if not torch.isfinite(loss):
            if snapshot is not None:
                tuned.load_state_dict(snapshot)
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    return tuned
