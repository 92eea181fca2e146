"""Conditional noise predictor: a small U-shaped encoder-decoder.

Two down/up levels with timestep conditioning added per residual block and
cross-attention to the text embedding sequence at the bottleneck. The same
class serves the base model (3 input channels) and the super-resolution model
(6 input channels: noisy image concatenated with the upsampled low-res
conditioning image).

Padding rows of the embedding sequence are excluded from attention by -inf
masking of the logits, which zeroes their weights exactly: editing a masked
row's values cannot change the output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .text import EmbeddingSequence


@dataclass(frozen=True)
class PredictorArch:
    resolution: int = 16
    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2)
    cond_dim: int = 64
    time_dim: int = 64
    attn_heads: int = 2

    def describe(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = ",".join(str(m) for m in self.channel_mult)
        return d

    @staticmethod
    def from_description(d: dict) -> "PredictorArch":
        return PredictorArch(
            resolution=int(d["resolution"]),
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            base_channels=int(d["base_channels"]),
            channel_mult=tuple(int(m) for m in str(d["channel_mult"]).split(",")),
            cond_dim=int(d["cond_dim"]),
            time_dim=int(d["time_dim"]),
            attn_heads=int(d["attn_heads"]),
        )


def timestep_features(t: torch.Tensor, dim: int, max_steps: int) -> torch.Tensor:
    """Standard sinusoidal embedding of the raw step index, shape (batch, dim).

    Frequencies form a geometric ladder from 1 down to 1/10000, so adjacent
    integer steps stay distinguishable at the fast end while the slow end
    tracks overall progress through the schedule.
    """
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / half)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial-to-token attention with exact exclusion of masked tokens."""

    def __init__(self, channels, cond_dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, cond, cond_mask):
        # x: (B, C, H, W); cond: (B, T, d); cond_mask: (B, T) bool
        b, c, h, w = x.shape
        unmaskable = ~cond_mask.any(dim=1)  # rows with no attendable tokens
        if unmaskable.all():
            return x
        safe_mask = cond_mask | unmaskable[:, None]  # keep softmax finite, zeroed below
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(cond)
        v = self.to_v(cond)
        dh = c // self.heads
        q = q.reshape(b, h * w, self.heads, dh).transpose(1, 2)
        k = k.reshape(b, -1, self.heads, dh).transpose(1, 2)
        v = v.reshape(b, -1, self.heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)  # (B, heads, HW, T)
        logits = logits.masked_fill(~safe_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        if unmaskable.any():
            out = out * (~unmaskable)[:, None, None, None]
        return x + out


class NoisePredictor(nn.Module):
    """f(x_t, t, e) -> estimated noise, same shape as x_t."""

    def __init__(self, arch: PredictorArch, max_steps: int, seed: int = 0):
        super().__init__()
        self.arch = arch
        self.max_steps = max_steps
        with torch.random.fork_rng():
            torch.manual_seed(seed)  # deterministic init without touching global RNG
            self._build(arch)

    def _build(self, arch: PredictorArch):
        chans = [arch.base_channels * m for m in arch.channel_mult]
        time_dim = arch.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim * 2), nn.SiLU(), nn.Linear(time_dim * 2, time_dim)
        )
        # pooled text enters the per-block conditioning vector alongside the
        # timestep; cross-attention alone starves global attributes like color
        self.cond_pool = nn.Linear(arch.cond_dim, time_dim)
        self.conv_in = nn.Conv2d(arch.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, ch in enumerate(chans):
            in_ch = chans[max(i - 1, 0)]
            self.down_blocks.append(ResBlock(in_ch, ch, time_dim))
            self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        mid_ch = chans[-1]
        self.mid_block1 = ResBlock(mid_ch, mid_ch, time_dim)
        self.mid_attn = CrossAttention(mid_ch, arch.cond_dim, arch.attn_heads)
        self.mid_block2 = ResBlock(mid_ch, mid_ch, time_dim)

        # walking back up, h carries chans[i] channels entering level i
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            out_ch = chans[max(i - 1, 0)]
            self.upsamples.append(nn.ConvTranspose2d(ch, ch, 2, stride=2))
            self.up_blocks.append(ResBlock(ch + ch, out_ch, time_dim))

        self.norm_out = nn.GroupNorm(8, chans[0])
        self.conv_out = nn.Conv2d(chans[0], arch.out_channels, 3, padding=1)

    def forward(self, x, t, cond, cond_mask):
        # x: (B, C_in, H, W); t: (B,) long; cond: (B, T, d); cond_mask: (B, T)
        temb = self.time_mlp(timestep_features(t, self.arch.time_dim, self.max_steps))
        weights = cond_mask.to(cond.dtype)[:, :, None]
        pooled = (cond * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
        temb = temb + self.cond_pool(pooled)
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid_block1(h, temb)
        h = self.mid_attn(h, cond, cond_mask)
        h = self.mid_block2(h, temb)
        for up, block in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def predict(self, x, t: int, e: EmbeddingSequence) -> torch.Tensor:
        """Single-image convenience wrapper: (C, H, W) in, (C, H, W) out."""
        tt = torch.tensor([t], dtype=torch.long)
        out = self.forward(x[None], tt, e.matrix[None], e.mask[None])
        return out[0]

    def param_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])

    def clone(self) -> "NoisePredictor":
        copy = NoisePredictor(self.arch, self.max_steps)
        copy.load_state_dict(self.state_dict())
        return copy
