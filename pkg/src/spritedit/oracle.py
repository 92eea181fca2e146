"""Oracle attribute classifier for sprite renders.

A shared convolutional trunk feeds one linear head per attribute. It is
trained on clean renders of the full spec space with noise augmentation
(including forward-diffusion style mixing) so it stays usable on sampled
images, and with label smoothing so confidence on garbage inputs is not
saturated. Ground truth for every edit-verification harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, sprites
from .sprites import ATTRIBUTES, SpriteSpec


class OracleNet(nn.Module):
    def __init__(self, resolution: int, seed: int = 0):
        super().__init__()
        self.resolution = resolution
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
            self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
            self.conv3 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
            flat = 64 * (resolution // 4) ** 2
            self.fc = nn.Linear(flat, 128)
            self.heads = nn.ModuleDict(
                {name: nn.Linear(128, len(values)) for name, values in ATTRIBUTES.items()}
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        h = F.silu(self.conv3(h))
        return F.silu(self.fc(h.flatten(1)))

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.features(x)
        return {name: head(feats) for name, head in self.heads.items()}


@dataclass
class Classification:
    spec: SpriteSpec
    confidence: dict[str, float]


class Oracle:
    """Frozen classifier exposing per-attribute argmax plus confidence."""

    def __init__(self, net: OracleNet):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def resolution(self) -> int:
        return self.net.resolution

    def classify(self, x: torch.Tensor) -> Classification:
        with torch.no_grad():
            logits = self.net(x[None])
        values = {}
        confidence = {}
        for name, row in logits.items():
            probs = row[0].softmax(dim=0)
            idx = int(probs.argmax())
            values[name] = ATTRIBUTES[name][idx]
            confidence[name] = float(probs[idx])
        return Classification(SpriteSpec(**values), confidence)

    def agreement(self, x: torch.Tensor, spec: SpriteSpec) -> float:
        """Fraction of attributes on which the classifier matches the spec."""
        got = self.classify(x).spec
        names = list(ATTRIBUTES)
        return sum(getattr(got, n) == getattr(spec, n) for n in names) / len(names)

    def feature_vector(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net.features(x[None])[0]


def classify_attributes(x: torch.Tensor, oracle: Oracle) -> Classification:
    return oracle.classify(x)


def train_oracle(resolution: int = sprites.BASE_RES, steps: int = 1500,
                 batch_size: int = 64, lr: float = 2e-3, seed: int = 0,
                 label_smoothing: float = 0.1) -> Oracle:
    """Fit the per-attribute heads on the enumerated spec space."""
    specs = sprites.all_specs()
    images = torch.stack([sprites.render_sprite(s, resolution) for s in specs])
    targets = {
        name: torch.tensor([ATTRIBUTES[name].index(getattr(s, name)) for s in specs])
        for name in ATTRIBUTES
    }
    net = OracleNet(resolution, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    for step in range(steps):
        idx = torch.randint(0, len(specs), (batch_size,), generator=rng)
        x = images[idx]
        # mix of plain gaussian noise and diffusion-style signal attenuation
        sigma = torch.rand((batch_size, 1, 1, 1), generator=rng) * 0.25
        x = x + sigma * torch.randn(x.shape, generator=rng)
        mix = torch.rand((batch_size,), generator=rng) < 0.3
        if mix.any():
            a = 0.55 + 0.45 * torch.rand((batch_size, 1, 1, 1), generator=rng)
            noise = torch.randn(x.shape, generator=rng)
            mixed = a.sqrt() * x + (1 - a).sqrt() * noise
            x = torch.where(mix[:, None, None, None], mixed, x)
        logits = net(x)
        loss = sum(
            F.cross_entropy(logits[name], targets[name][idx], label_smoothing=label_smoothing)
            for name in ATTRIBUTES
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    return Oracle(net)


def clean_accuracy(oracle: Oracle) -> float:
    """Exact-spec accuracy over the full enumeration at the oracle resolution."""
    specs = sprites.all_specs()
    hits = 0
    for s in specs:
        if oracle.classify(sprites.render_sprite(s, oracle.resolution)).spec == s:
            hits += 1
    return hits / len(specs)


def save_oracle(oracle: Oracle, ckpt_dir: Path, extra: dict | None = None) -> None:
    meta = {"kind": "oracle", "resolution": oracle.resolution}
    meta.update(extra or {})
    checkpoint.save_state(ckpt_dir, dict(oracle.net.state_dict()), meta)


def load_oracle(ckpt_dir: Path) -> Oracle:
    manifest, state = checkpoint.load_state(ckpt_dir)
    net = OracleNet(int(manifest["resolution"]))
    net.load_state_dict(state)
    return Oracle(net)
