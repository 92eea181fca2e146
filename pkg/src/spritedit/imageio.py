"""PNG round-tripping for [-1, 1] image tensors.

All persisted images go through 8-bit quantization. Anything that must be
byte-reproducible (render caches, service responses) is first snapped onto
the uint8 grid with quantize(), so encode/decode is an exact round trip.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = img.detach().clamp(-1.0, 1.0).numpy()
    arr = np.round((arr + 1.0) / 2.0 * 255.0).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) in [-1, 1]."""
    t = torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1))
    return t / 255.0 * 2.0 - 1.0


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Snap a [-1, 1] image onto the values PNG storage can represent."""
    return from_uint8(to_uint8(img))


def encode_png(img: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def decode_png(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


def save_png(img: torch.Tensor, path: Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_png(img))
    tmp.replace(path)  # atomic per-key cache commit


def load_png(path: Path) -> torch.Tensor:
    return decode_png(Path(path).read_bytes())
