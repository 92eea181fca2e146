"""Forward process, denoising objective, samplers, and the training loop.

Conventions used throughout:

* alpha[t] is the cumulative signal fraction, so a noisy sample is
  sqrt(alpha[t]) * x0 + sqrt(1 - alpha[t]) * eps.
* The final schedule entry is exactly alpha[T] = 0. A sample at that level is
  pure noise and the model call carries no information, so reverse steps
  leaving t = T use the prior estimate x0 = 0 and treat the sample itself as
  the noise. Every other step queries the model.
* Randomness is always drawn from an explicit torch.Generator; nothing here
  touches global RNG state, so sampling runs are reproducible and safe to run
  in parallel with training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import NumericError
from .schedule import DiffusionSchedule
from .text import EmbeddingSequence, TextEncoder
from .unet import NoisePredictor


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "ddim"
    num_inference_steps: int = 50
    guidance_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if self.num_inference_steps < 1:
            raise ValueError("num_inference_steps must be positive")
        if self.guidance_weight < 0:
            raise ValueError("guidance_weight must be nonnegative")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor,
                    schedule: DiffusionSchedule) -> torch.Tensor:
    """Noise a clean image to level t: sqrt(a_t) x0 + sqrt(1 - a_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor):
        a = schedule.alphas[t].to(x0.dtype)
        a = a.reshape(-1, *([1] * (x0.ndim - 1)))
    else:
        a = torch.tensor(schedule.alpha(int(t)), dtype=x0.dtype)
    return a.sqrt() * x0 + (1.0 - a).sqrt() * eps


def denoising_loss(x0: torch.Tensor, e: EmbeddingSequence, model,
                   schedule: DiffusionSchedule, rng: torch.Generator,
                   batch_size: int = 1) -> torch.Tensor:
    """Monte-Carlo denoising objective, differentiable w.r.t. e and the model.

    Draws t ~ Uniform{1..T} and eps ~ N(0, I) per batch row, noises x0, and
    returns the mean squared error between eps and the model's prediction.
    """
    cond_dim = getattr(getattr(model, "arch", None), "cond_dim", None)
    if cond_dim is not None and e.dim != cond_dim:
        raise ValueError(f"embedding dim {e.dim} != model conditioning dim {cond_dim}")
    t = torch.randint(1, schedule.num_steps + 1, (batch_size,), generator=rng)
    eps = torch.randn((batch_size, *x0.shape), generator=rng, dtype=x0.dtype)
    x0_batch = x0.unsqueeze(0).expand_as(eps)
    xt = forward_diffuse(x0_batch, t, eps, schedule)
    cond = e.matrix.unsqueeze(0).expand(batch_size, -1, -1)
    mask = e.mask.unsqueeze(0).expand(batch_size, -1)
    pred = model(xt, t, cond, mask)
    if not torch.isfinite(pred).all():
        bad = (~torch.isfinite(pred).reshape(batch_size, -1).all(dim=1)).nonzero()[0, 0]
        raise NumericError(f"non-finite model output at t={int(t[bad])}", t=int(t[bad]))
    return ((pred - eps) ** 2).mean()


def _estimate_x0(x_t: torch.Tensor, t: int, eps: torch.Tensor,
                 schedule: DiffusionSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert the forward process; at alpha = 0 fall back to the prior mean."""
    a = schedule.alpha(t)
    if a == 0.0:
        return torch.zeros_like(x_t), x_t
    x0 = (x_t - (1.0 - a) ** 0.5 * eps) / a**0.5
    return x0, eps


def _predict_eps(model, x_t, t, e: EmbeddingSequence,
                 e_uncond: EmbeddingSequence | None, guidance_weight: float):
    """Model call in a canonical batch layout so results are reproducible.

    Guided calls always run as a two-row batch (uncond, cond); unguided calls
    as a single row. With weight exactly 1 the unguided path is taken, making
    guidance at 1.0 pixel-identical to no guidance.
    """
    tt = torch.full((1,), t, dtype=torch.long)
    if guidance_weight == 1.0:
        return model(x_t[None], tt, e.matrix[None], e.mask[None])[0]
    x2 = x_t[None].expand(2, *x_t.shape)
    cond = torch.stack([e_uncond.matrix, e.matrix])
    mask = torch.stack([e_uncond.mask, e.mask])
    out = model(x2, tt.expand(2), cond, mask)
    return out[0] + guidance_weight * (out[1] - out[0])


def ddpm_step(x_t: torch.Tensor, t: int, model, e: EmbeddingSequence,
              schedule: DiffusionSchedule, rng: torch.Generator) -> torch.Tensor:
    """One ancestral reverse step t -> t-1.

    Predicts the noise, forms the posterior mean over x_{t-1}, and perturbs it
    by the posterior standard deviation. The noise coefficient vanishes at
    t = 1 because alpha[0] = 1, so the last step is deterministic.
    """
    if t < 1:
        raise ValueError(f"ddpm_step requires t >= 1, got {t}")
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t - 1)
    if a_t == 0.0:
        eps = x_t
        x0 = torch.zeros_like(x_t)
    else:
        x0, eps = _estimate_x0(x_t, t, _duck_predict(model, x_t, t, e), schedule)
    alpha_step = a_t / a_prev
    beta_step = 1.0 - alpha_step
    denom = 1.0 - a_t
    mean = (a_prev**0.5 * beta_step / denom) * x0 + (alpha_step**0.5 * (1.0 - a_prev) / denom) * x_t
    var = beta_step * (1.0 - a_prev) / denom
    noise = torch.randn(x_t.shape, generator=rng)
    return mean + var**0.5 * noise


def _duck_predict(model, x_t, t, e):
    tt = torch.full((1,), t, dtype=torch.long)
    return model(x_t[None], tt, e.matrix[None], e.mask[None])[0]


def ddim_step(x_t: torch.Tensor, t: int, t_prev: int, model, e: EmbeddingSequence,
              schedule: DiffusionSchedule) -> torch.Tensor:
    """Deterministic reverse step t -> t_prev.

    Reconstructs the clean-image estimate from the predicted noise, then
    re-noises it to level t_prev with the same prediction.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    if schedule.alpha(t) == 0.0:
        x0, eps = torch.zeros_like(x_t), x_t
    else:
        eps = _duck_predict(model, x_t, t, e)
        x0, eps = _estimate_x0(x_t, t, eps, schedule)
    a_prev = schedule.alpha(t_prev)
    return a_prev**0.5 * x0 + (1.0 - a_prev) ** 0.5 * eps


def inference_timesteps(schedule: DiffusionSchedule, num_inference_steps: int) -> list[int]:
    """Evenly spaced grid T = t_0 > t_1 > ... > t_S = 0."""
    if num_inference_steps > schedule.num_steps:
        raise ValueError("num_inference_steps cannot exceed schedule num_steps")
    grid = torch.linspace(schedule.num_steps, 0, num_inference_steps + 1)
    steps = sorted({int(round(float(g))) for g in grid}, reverse=True)
    return steps


def sample(model, e_cond: EmbeddingSequence, e_uncond: EmbeddingSequence | None,
           config: SamplerConfig, schedule: DiffusionSchedule,
           shape: tuple[int, ...] | None = None,
           cond_image: torch.Tensor | None = None,
           x_init: torch.Tensor | None = None, t_init: int | None = None) -> torch.Tensor:
    """Run the full reverse process from seeded Gaussian noise.

    cond_image, when given, is concatenated to the sample on the channel axis
    before every model call (the low-resolution conditioning of the SR model).
    x_init/t_init start the chain from a partially noised image instead of
    pure noise. The final output is clamped to [-1, 1]; intermediates are not.
    """
    if config.guidance_weight != 1.0 and e_uncond is None:
        raise ValueError("guidance requires an unconditional embedding")
    if config.method == "ddpm" and config.num_inference_steps != schedule.num_steps:
        raise ValueError("ddpm sampling runs the full chain; set num_inference_steps = num_steps")
    with torch.no_grad():
        return _sample_impl(model, e_cond, e_uncond, config, schedule, shape,
                            cond_image, x_init, t_init)


def _sample_impl(model, e_cond, e_uncond, config, schedule, shape, cond_image,
                 x_init, t_init) -> torch.Tensor:
    rng = torch.Generator().manual_seed(config.seed)
    if shape is None:
        shape = x_init.shape if x_init is not None else None
    if shape is None:
        raise ValueError("shape required when x_init is absent")

    def predict(x, t):
        x_in = x if cond_image is None else torch.cat([x, cond_image], dim=0)
        return _predict_eps(model, x_in, t, e_cond, e_uncond, config.guidance_weight)

    if x_init is not None:
        x = x_init.clone()
        t_start = t_init if t_init is not None else schedule.num_steps
    else:
        x = torch.randn(shape, generator=rng)
        t_start = schedule.num_steps

    if config.method == "ddim":
        steps = [t for t in inference_timesteps(schedule, config.num_inference_steps) if t <= t_start]
        if steps[0] != t_start:
            steps = [t_start] + steps
        for t, t_prev in zip(steps[:-1], steps[1:]):
            if schedule.alpha(t) == 0.0:
                x0, eps = torch.zeros_like(x), x
            else:
                x0, eps = _estimate_x0(x, t, predict(x, t), schedule)
            a_prev = schedule.alpha(t_prev)
            x = a_prev**0.5 * x0 + (1.0 - a_prev) ** 0.5 * eps
    else:
        for t in range(t_start, 0, -1):
            a_t, a_prev = schedule.alpha(t), schedule.alpha(t - 1)
            if a_t == 0.0:
                x0, eps = torch.zeros_like(x), x
            else:
                x0, eps = _estimate_x0(x, t, predict(x, t), schedule)
            alpha_step = a_t / a_prev
            beta_step = 1.0 - alpha_step
            denom = 1.0 - a_t
            mean = (a_prev**0.5 * beta_step / denom) * x0
            mean = mean + (alpha_step**0.5 * (1.0 - a_prev) / denom) * x
            var = beta_step * (1.0 - a_prev) / denom
            x = mean + var**0.5 * torch.randn(x.shape, generator=rng)
    return x.clamp(-1.0, 1.0)


@dataclass
class TrainResult:
    model: NoisePredictor
    losses: list[float] = field(default_factory=list)
    aborted_at: int | None = None  # step index of a divergence abort, if any


def train_model(dataset, model: NoisePredictor, text_encoder: TextEncoder,
                schedule: DiffusionSchedule, steps: int, lr: float,
                cond_drop_prob: float = 0.0, batch_size: int = 32, seed: int = 0,
                log_path: Path | None = None, split: str = "train",
                snapshot_every: int = 100, lr_schedule: str = "constant",
                make_batch=None) -> TrainResult:
    """Joint denoising training of the predictor and the embedding table.

    Per example, the caption embedding is replaced by the learned null
    embedding with probability cond_drop_prob, which is what makes
    classifier-free guidance usable at sampling time. If the loss ever goes
    non-finite the run aborts and the last snapshot is restored.
    lr_schedule "cosine" anneals to a tenth of the peak rate.
    """
    rng = torch.Generator().manual_seed(seed)
    params = list(model.parameters()) + list(text_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    decay = None
    if lr_schedule == "cosine":
        decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(steps, 1),
                                                           eta_min=lr * 0.1)
    elif lr_schedule != "constant":
        raise ValueError(f"unknown lr_schedule {lr_schedule!r}")
    losses: list[float] = []
    rows = []
    snapshot = None
    aborted_at = None

    if make_batch is None:
        indices = dataset.indices(split)

        def make_batch(step, rng):
            pick = torch.randint(0, len(indices), (batch_size,), generator=rng)
            idx = [indices[int(i)] for i in pick]
            imgs = torch.stack([dataset.image(i) for i in idx])
            caps = [dataset.caption(i) for i in idx]
            return imgs, caps

    for step in range(steps):
        if snapshot_every and step % snapshot_every == 0:
            snapshot = {
                "model": {k: v.clone() for k, v in model.state_dict().items()},
                "text": {k: v.clone() for k, v in text_encoder.state_dict().items()},
            }
        imgs, caps = make_batch(step, rng)
        n = imgs.shape[0]
        drop = torch.rand(n, generator=rng) < cond_drop_prob
        cond_rows, mask_rows = [], []
        for i, cap in enumerate(caps):
            e = text_encoder.null_embedding() if bool(drop[i]) else text_encoder.encode(cap)
            cond_rows.append(e.matrix)
            mask_rows.append(e.mask)
        cond = torch.stack(cond_rows)
        mask = torch.stack(mask_rows)

        t = torch.randint(1, schedule.num_steps + 1, (n,), generator=rng)
        eps = torch.randn(imgs.shape, generator=rng)
        xt = forward_diffuse(imgs, t, eps, schedule)
        pred = model(xt, t, cond, mask)
        loss = ((pred - eps) ** 2).mean()

        if not torch.isfinite(loss):
            if snapshot is not None:
                model.load_state_dict(snapshot["model"])
                text_encoder.load_state_dict(snapshot["text"])
            aborted_at = step
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        rows.append((step, loss.item(), opt.param_groups[0]["lr"]))
        if decay is not None:
            decay.step()

    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            writer.writerows(rows)
    return TrainResult(model=model, losses=losses, aborted_at=aborted_at)
