"""Image decoding and tensor helpers. Images are float CHW tensors in [0, 1]."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def resize(image: torch.Tensor, resolution: int) -> torch.Tensor:
    """Square resize; a no-op (same object) when already at ``resolution``."""
    if image.shape[-2:] == (resolution, resolution):
        return image
    out = F.interpolate(image.unsqueeze(0), size=(resolution, resolution), mode="bilinear",
                        align_corners=False, antialias=True)
    return out.squeeze(0).clamp_(0.0, 1.0)


def to_png_bytes(image: torch.Tensor) -> bytes:
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> torch.Tensor:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_png_bytes(image))
    return path
