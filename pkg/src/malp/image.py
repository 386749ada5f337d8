"""Image helpers shared by every stage of the pipeline.

Images are float tensors in [0, 1] laid out as ``(C, H, W)`` or ``(B, C, H, W)``.
Any network-specific normalisation happens inside the networks.
"""
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

MIN_SIDE = 8


def _check_channels(img, expected):
    if img.dim() not in (3, 4):
        raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {tuple(img.shape)}")
    if img.shape[-3] != expected:
        raise ValueError(f"expected {expected} channels, got {img.shape[-3]}")


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """Luminance of an RGB image, keeping a singleton channel axis."""
    _check_channels(img, 3)
    w = torch.tensor(GRAY_WEIGHTS, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def resize_bilinear(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if img.dim() not in (3, 4):
        raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {tuple(img.shape)}")
    if img.shape[-2:] == (out_h, out_w):
        return img
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    # half-pixel centres, same convention as PIL / OpenCV
    out = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out if batched else out.squeeze(0)


def clamp01(img: torch.Tensor) -> torch.Tensor:
    if torch.isnan(img).any():
        raise ValueError("image contains NaN values")
    return img.clamp(0.0, 1.0)


def load_image(path, size=None) -> torch.Tensor:
    """Read a PNG/JPEG file as a (3, H, W) float tensor in [0, 1]."""
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if size is not None:
        img = resize_bilinear(img, size, size)
    return img


def save_image(img: torch.Tensor, path) -> None:
    """Write a (1|3, H, W) tensor as an 8-bit PNG (values are clamped and rounded)."""
    _check_any(img)
    arr = clamp01(img.detach().cpu().float())
    arr = (arr * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)


def _check_any(img):
    if img.dim() != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) tensor, got shape {tuple(img.shape)}")
    if min(img.shape[-2:]) < MIN_SIDE:
        raise ValueError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}")
