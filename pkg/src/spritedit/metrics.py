"""Alignment and fidelity measurement.

The alignment scorer is a small contrastive image/caption embedder standing in
for an off-the-shelf vision-language backbone: score(x, caption) is the cosine
between the two unit embeddings, in [-1, 1], computed per pair so batch
composition cannot change it. Fidelity to the input image is PSNR (capped) or
a feature distance taken from the frozen oracle trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint, sprites
from .errors import TrainingFailure
from .oracle import Oracle
from .text import TOKEN_COUNT, Vocabulary, default_vocabulary, tokenize

PSNR_CAP_DB = 60.0


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images, capped at 60."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


class ScorerNet(nn.Module):
    def __init__(self, vocab_size: int, resolution: int = sprites.BASE_RES,
                 dim: int = 64, seed: int = 0):
        super().__init__()
        self.resolution = resolution
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 32, 3, padding=1)
            self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
            self.conv3 = nn.Conv2d(64, 64, 3, stride=2, padding=1)
            self.img_fc = nn.Linear(64 * (resolution // 4) ** 2, dim)
            self.tok = nn.Embedding(vocab_size, dim)
            self.txt_fc = nn.Sequential(nn.Linear(dim, 128), nn.SiLU(), nn.Linear(128, dim))
            self.log_temp = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    def embed_images(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        h = F.silu(self.conv3(h))
        return F.normalize(self.img_fc(h.flatten(1)), dim=-1)

    def embed_tokens(self, ids: torch.Tensor, pad_id: int) -> torch.Tensor:
        mask = (ids != pad_id).float()  # pooling over real tokens only
        emb = self.tok(ids) * mask[..., None]
        pooled = emb.sum(dim=1) / mask.sum(dim=1, keepdim=True).clamp(min=1.0)
        return F.normalize(self.txt_fc(pooled), dim=-1)


@dataclass
class AlignmentScorer:
    net: ScorerNet
    vocab: Vocabulary

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _ids(self, captions: list[str]) -> torch.Tensor:
        return torch.tensor([tokenize(c, self.vocab, TOKEN_COUNT) for c in captions])

    def score(self, image: torch.Tensor, caption: str) -> float:
        with torch.no_grad():
            zi = self.net.embed_images(image[None])
            zt = self.net.embed_tokens(self._ids([caption]), self.vocab.pad_id)
        return float((zi * zt).sum())

    def retrieve(self, image: torch.Tensor, captions: list[str]) -> int:
        with torch.no_grad():
            zi = self.net.embed_images(image[None])
            zt = self.net.embed_tokens(self._ids(captions), self.vocab.pad_id)
        return int((zt @ zi[0]).argmax())


def train_scorer(dataset: sprites.SpriteDataset, steps: int = 2000, batch_size: int = 64,
                 lr: float = 1e-3, seed: int = 0, vocab: Vocabulary | None = None,
                 accuracy_floor: float = 0.9) -> AlignmentScorer:
    """Contrastive training over (render, caption) pairs.

    Batches draw specs without replacement so every caption in a batch is a
    distinct negative. Raises TrainingFailure if held-out retrieval misses the
    accuracy floor.
    """
    vocab = vocab or default_vocabulary()
    specs = sorted(set(dataset.specs), key=sprites.caption_of)
    res = dataset.config.resolution
    images = torch.stack([sprites.render_sprite(s, res) for s in specs])
    ids = torch.tensor([tokenize(sprites.caption_of(s), vocab, TOKEN_COUNT) for s in specs])

    net = ScorerNet(vocab.size, resolution=res, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)
    for step in range(steps):
        pick = torch.randperm(len(specs), generator=rng)[:batch_size]
        x = images[pick]
        x = x + torch.rand((len(pick), 1, 1, 1), generator=rng) * 0.15 * torch.randn(x.shape, generator=rng)
        zi = net.embed_images(x)
        zt = net.embed_tokens(ids[pick], vocab.pad_id)
        logits = zi @ zt.T * net.log_temp.exp()
        labels = torch.arange(len(pick))
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        opt.zero_grad()
        loss.backward()
        opt.step()

    scorer = AlignmentScorer(net, vocab)
    acc = retrieval_accuracy(scorer, dataset)
    if acc < accuracy_floor:
        raise TrainingFailure(f"caption retrieval accuracy {acc:.3f} below floor {accuracy_floor}")
    return scorer


def retrieval_accuracy(scorer: AlignmentScorer, dataset: sprites.SpriteDataset,
                       split: str = "holdout") -> float:
    """Top-1 caption retrieval over the full enumerated caption set."""
    captions = [sprites.caption_of(s) for s in sprites.all_specs()]
    specs = sorted({dataset.specs[i] for i in dataset.indices(split)}, key=sprites.caption_of)
    if not specs:
        specs = sorted(set(dataset.specs), key=sprites.caption_of)
    hits = 0
    for s in specs:
        img = sprites.render_sprite(s, dataset.config.resolution)
        hits += captions[scorer.retrieve(img, captions)] == sprites.caption_of(s)
    return hits / len(specs)


@dataclass
class FidelityMetric:
    """Similarity to a reference image: capped PSNR or oracle-feature distance."""

    mode: str = "psnr"
    oracle: Oracle | None = None

    def __post_init__(self):
        if self.mode not in ("psnr", "feature_distance"):
            raise ValueError(f"unknown fidelity mode {self.mode!r}")
        if self.mode == "feature_distance" and self.oracle is None:
            raise ValueError("feature_distance mode needs an oracle")

    def __call__(self, image: torch.Tensor, reference: torch.Tensor) -> float:
        if self.mode == "psnr":
            return psnr(image, reference)
        fa = self.oracle.feature_vector(image)
        fb = self.oracle.feature_vector(reference)
        return float(torch.linalg.norm(fa - fb))


def save_scorer(scorer: AlignmentScorer, ckpt_dir: Path, extra: dict | None = None) -> None:
    meta = {"kind": "scorer", "resolution": scorer.net.resolution,
            "vocab_size": scorer.vocab.size}
    meta.update(extra or {})
    checkpoint.save_state(ckpt_dir, dict(scorer.net.state_dict()), meta)
    scorer.vocab.save(Path(ckpt_dir) / "vocab.txt")


def load_scorer(ckpt_dir: Path) -> AlignmentScorer:
    manifest, state = checkpoint.load_state(ckpt_dir)
    vocab = Vocabulary.load(Path(ckpt_dir) / "vocab.txt")
    net = ScorerNet(vocab.size, resolution=int(manifest["resolution"]))
    net.load_state_dict(state)
    return AlignmentScorer(net, vocab)
