"""Real-image sources: folders of image files and a procedural toy set."""
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .image import load_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def toy_images(n, resolution=64, seed=0):
    """Procedural natural-ish images: smooth colour fields, mid-frequency texture and a few blobs."""
    gen = torch.Generator().manual_seed(seed)
    r = resolution
    yy, xx = torch.meshgrid(torch.arange(r, dtype=torch.float32), torch.arange(r, dtype=torch.float32),
                            indexing="ij")
    out = torch.empty(n, 3, r, r)
    for i in range(n):
        base = 0.25 + 0.5 * torch.rand(3, 1, 1, generator=gen)
        low = F.interpolate(torch.randn(1, 3, 4, 4, generator=gen), size=(r, r), mode="bicubic",
                            align_corners=False)[0]
        mid = F.interpolate(torch.randn(1, 3, r // 4, r // 4, generator=gen), size=(r, r), mode="bilinear",
                            align_corners=False)[0]
        img = base + 0.15 * low + 0.05 * mid
        for _ in range(int(torch.randint(1, 4, (1,), generator=gen))):
            cy, cx = (torch.rand(2, generator=gen) * r).tolist()
            rad = float(r * (0.08 + 0.15 * torch.rand(1, generator=gen)))
            col = torch.rand(3, 1, 1, generator=gen)
            soft = torch.sigmoid((rad - ((yy - cy) ** 2 + (xx - cx) ** 2).sqrt()) / 1.5)
            img = img * (1 - 0.7 * soft) + 0.7 * soft * col
        out[i] = img.clamp(0.0, 1.0)
    return out


def image_folder(path, resolution, limit=None):
    """Load every image under ``path`` (sorted), resized to resolution x resolution.

    Returns the stacked tensor and the list of ids (file stems).
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if limit is not None:
        files = files[:limit]
    if not files:
        raise ConfigError(f"no images found under {root}")
    return torch.stack([load_image(p, resolution) for p in files]), [p.stem for p in files]


def load_dataset(spec, resolution):
    """Resolve a dataset spec from a config: ``{"kind": "toy", "n": .., "seed": ..}`` or ``{"kind": "folder", "path": ..}``."""
    kind = spec.get("kind", "toy")
    if kind == "toy":
        return toy_images(int(spec.get("n", 512)), resolution, int(spec.get("seed", 0)))
    if kind == "folder":
        return image_folder(spec["path"], resolution, spec.get("limit"))[0]
    raise ConfigError(f"unknown dataset kind {kind!r}")
