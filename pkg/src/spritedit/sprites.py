"""Procedural captioned sprite dataset.

Each sprite is one shape on a plain background, fully described by six
attributes. Every attribute is visually recoverable from the render: shapes
carry an orientation notch (a wedge cut from the center to the rim) so that
pose is legible even on a circle, which would otherwise be rotation-invariant.

Renders are anti-aliased by supersampling on a fixed 256x256 evaluation grid
regardless of output resolution, so a 32px render box-downsampled by 2 agrees
with the 16px render of the same spec.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .imageio import save_png

BASE_RES = 16
SR_RES = 32
SUPERSAMPLE_GRID = 256

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("top left", "top right", "bottom left", "bottom right", "center")
POSES = ("upright", "rotated")
SIZES = ("small", "large")
BACKGROUNDS = ("white", "black")

ATTRIBUTES = {
    "shape": SHAPES,
    "color": COLORS,
    "position": POSITIONS,
    "pose": POSES,
    "size": SIZES,
    "background": BACKGROUNDS,
}

_RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
}

_CENTERS = {
    "top left": (0.28, 0.28),
    "top right": (0.72, 0.28),
    "bottom left": (0.28, 0.72),
    "bottom right": (0.72, 0.72),
    "center": (0.5, 0.5),
}

_RADII = {"small": 0.16, "large": 0.26}

# wedge removed from every shape so orientation reads on all of them
_NOTCH_HALF_ANGLE = math.radians(30.0)
_ROTATED_ANGLE = math.radians(45.0)


@dataclass(frozen=True)
class SpriteSpec:
    shape: str
    color: str
    position: str
    pose: str
    size: str
    background: str

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            allowed = ATTRIBUTES[f.name]
            if value not in allowed:
                raise ValueError(f"{f.name}={value!r} not in {allowed}")

    def replace(self, **changes) -> "SpriteSpec":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs.update(changes)
        return SpriteSpec(**kwargs)


def all_specs() -> list[SpriteSpec]:
    """Enumerate the full spec space (480 combinations) in a fixed order."""
    out = []
    for shape in SHAPES:
        for color in COLORS:
            for position in POSITIONS:
                for pose in POSES:
                    for size in SIZES:
                        for background in BACKGROUNDS:
                            out.append(SpriteSpec(shape, color, position, pose, size, background))
    return out


def caption_of(spec: SpriteSpec) -> str:
    return f"{spec.size} {spec.color} {spec.shape} {spec.pose} {spec.position} {spec.background}"


def parse_caption(text: str) -> SpriteSpec | None:
    """Parse a caption back into a spec; None if the text is free-form.

    A caption is grammatical when every attribute is named exactly once and
    nothing else appears. Word order does not matter except inside the
    two-word positions.
    """
    words = text.lower().split()
    found: dict[str, str] = {}
    i = 0
    while i < len(words):
        w = words[i]
        if w in ("top", "bottom") and i + 1 < len(words) and words[i + 1] in ("left", "right"):
            value, key = f"{w} {words[i + 1]}", "position"
            i += 2
        else:
            for key, values in ATTRIBUTES.items():
                if w in values:
                    value = w
                    break
            else:
                return None
            i += 1
        if key in found:
            return None
        found[key] = value
    if set(found) != set(ATTRIBUTES):
        return None
    return SpriteSpec(**found)


def _shape_mask(spec: SpriteSpec, grid: int) -> np.ndarray:
    """Binary coverage of the sprite on a grid x grid evaluation lattice."""
    coords = (np.arange(grid) + 0.5) / grid
    xx, yy = np.meshgrid(coords, coords)  # xx: column position, yy: row position
    cx, cy = _CENTERS[spec.position]
    r = _RADII[spec.size]
    dx, dy = xx - cx, yy - cy

    # rotate into the shape's reference frame (y grows downward, so a positive
    # pose angle turns the sprite clockwise on screen)
    theta = _ROTATED_ANGLE if spec.pose == "rotated" else 0.0
    ux = math.cos(theta) * dx + math.sin(theta) * dy
    uy = -math.sin(theta) * dx + math.cos(theta) * dy

    if spec.shape == "circle":
        inside = ux**2 + uy**2 <= r**2
    elif spec.shape == "square":
        half = r / math.sqrt(2.0)
        inside = (np.abs(ux) <= half) & (np.abs(uy) <= half)
    else:  # triangle, apex up, inscribed in the radius
        verts = [
            (r * math.cos(a), -r * math.sin(a))
            for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3)
        ]
        inside = np.ones_like(ux, dtype=bool)
        for k in range(3):
            x1, y1 = verts[k]
            x2, y2 = verts[(k + 1) % 3]
            # vertices wind clockwise in screen coords; interior is right of each edge
            cross = (x2 - x1) * (uy - y1) - (y2 - y1) * (ux - x1)
            inside &= cross <= 0

    # carve the orientation notch: wedge opening upward in the reference frame
    ang = np.arctan2(-uy, ux)  # screen-up is +pi/2
    notch = np.abs(((ang - math.pi / 2) + math.pi) % (2 * math.pi) - math.pi) <= _NOTCH_HALF_ANGLE
    return inside & ~notch


def render_sprite(spec: SpriteSpec, resolution: int = BASE_RES) -> torch.Tensor:
    """Anti-aliased render of a spec, shape (3, res, res), values in [-1, 1]."""
    if resolution not in (BASE_RES, SR_RES):
        raise ValueError(f"resolution must be {BASE_RES} or {SR_RES}, got {resolution}")
    factor = SUPERSAMPLE_GRID // resolution
    mask = _shape_mask(spec, SUPERSAMPLE_GRID).astype(np.float64)
    # box-average the supersampled coverage down to the output resolution
    mask = mask.reshape(resolution, factor, resolution, factor).mean(axis=(1, 3))
    fg = np.array(_RGB[spec.color])[:, None, None]
    bg = np.array(_RGB[spec.background])[:, None, None]
    img = bg + mask[None] * (fg - bg)
    return torch.from_numpy(img).float()


@dataclass(frozen=True)
class DatasetConfig:
    num_samples: int = 4000
    resolution: int = BASE_RES
    seed: int = 0
    holdout_fraction: float = 0.1


@dataclass
class SpriteDataset:
    config: DatasetConfig
    specs: list[SpriteSpec]
    splits: list[str]  # "train" | "holdout", parallel to specs

    def __post_init__(self):
        self._cache: dict[SpriteSpec, torch.Tensor] = {}

    def __len__(self):
        return len(self.specs)

    def image(self, i: int) -> torch.Tensor:
        spec = self.specs[i]
        if spec not in self._cache:
            self._cache[spec] = render_sprite(spec, self.config.resolution)
        return self._cache[spec]

    def caption(self, i: int) -> str:
        return caption_of(self.specs[i])

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for spec, split in zip(self.specs, self.splits):
            h.update(f"{caption_of(spec)}|{split}\n".encode())
        return h.hexdigest()


def generate_dataset(config: DatasetConfig) -> SpriteDataset:
    """Sample specs uniformly and split them train/holdout by spec identity.

    The split is decided per unique spec, so no spec ever appears on both
    sides. Regeneration from the same config is bit-identical.
    """
    if config.num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(config.seed)
    universe = all_specs()
    order = rng.permutation(len(universe))
    n_holdout = int(round(config.holdout_fraction * len(universe)))
    holdout_ids = set(int(i) for i in order[:n_holdout])
    draws = rng.integers(0, len(universe), size=config.num_samples)
    specs = [universe[int(i)] for i in draws]
    splits = ["holdout" if int(i) in holdout_ids else "train" for i in draws]
    return SpriteDataset(config=config, specs=specs, splits=splits)


def export_dataset(dataset: SpriteDataset, out_dir: Path) -> Path:
    """Write PNGs plus a manifest CSV (filename, caption, split)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "caption", "split"])
        for i in range(len(dataset)):
            name = f"sprite_{i:05d}.png"
            save_png(dataset.image(i), out_dir / name)
            writer.writerow([name, dataset.caption(i), dataset.splits[i]])
    return manifest
