"""Learnable template set and additive image encryption."""
import struct

import numpy as np
import torch
import torch.nn as nn

from .image import clamp01, resize_bilinear
from .metrics import cosine_similarity

INIT_STD = 0.1
DEFAULT_STRENGTH = 0.30
_MAGIC = b"MALP"
_HEADER = struct.Struct("<4sHH")


class TemplateSet(nn.Module):
    """``n`` single-channel templates of shape (resolution, resolution) and a strength ``m``."""

    def __init__(self, templates: torch.Tensor, m: float = DEFAULT_STRENGTH):
        super().__init__()
        if templates.dim() != 3 or templates.shape[0] < 1:
            raise ValueError(f"templates must be (n, H, W) with n >= 1, got {tuple(templates.shape)}")
        if not 0.0 < m <= 1.0:
            raise ValueError(f"template strength must lie in (0, 1], got {m}")
        self.templates = nn.Parameter(templates.clone())
        self.m = float(m)

    @property
    def n(self):
        return self.templates.shape[0]

    @property
    def resolution(self):
        return self.templates.shape[-1]

    def template_at(self, index, height=None, width=None):
        """Templates for ``index`` (int or (B,) tensor), upsampled to H x W when needed."""
        if isinstance(index, int):
            if not 0 <= index < self.n:
                raise ValueError(f"template index {index} out of range [0, {self.n})")
            t = self.templates[index].unsqueeze(0)
        else:
            index = torch.as_tensor(index, dtype=torch.long)
            if index.numel() and (index.min() < 0 or index.max() >= self.n):
                raise ValueError(f"template index out of range [0, {self.n})")
            t = self.templates[index].unsqueeze(1)
        if height is not None and (height, width) != tuple(t.shape[-2:]):
            t = resize_bilinear(t if t.dim() == 4 else t.unsqueeze(0), height, width)
            if isinstance(index, int):
                t = t.squeeze(0)
        return t


def init_template_set(n: int, resolution: int = 128, seed: int = 0,
                      m: float = DEFAULT_STRENGTH) -> TemplateSet:
    if n < 1:
        raise ValueError(f"template set size must be >= 1, got {n}")
    gen = torch.Generator().manual_seed(seed)
    values = torch.randn(n, resolution, resolution, generator=gen) * INIT_STD
    return TemplateSet(values, m)


def encrypt(img: torch.Tensor, tset: TemplateSet, index) -> torch.Tensor:
    """``clamp01(img + m * S_index)`` with the template broadcast over RGB.

    ``img`` may be (3, H, W) with an int index or (B, 3, H, W) with an int or a
    (B,) index tensor. Templates are bilinearly resized to the image size.
    """
    if img.shape[-3] != 3:
        raise ValueError(f"encryption expects RGB images, got {img.shape[-3]} channels")
    h, w = img.shape[-2:]
    t = tset.template_at(index, h, w).to(img.dtype)
    if img.dim() == 3 and t.dim() == 4:
        raise ValueError("an unbatched image needs an integer template index")
    return clamp01(img + tset.m * t)


def select_random_index(tset: TemplateSet, rng: torch.Generator, size=None):
    """Uniform template index; an int, or a (size,) tensor when ``size`` is given."""
    if size is None:
        return int(torch.randint(tset.n, (1,), generator=rng))
    return torch.randint(tset.n, (size,), generator=rng)


def lowpass_mask(resolution: int, radius=None, device=None) -> torch.Tensor:
    """Centered disc over an fftshift-ed spectrum; radius defaults to resolution // 4."""
    radius = resolution // 4 if radius is None else radius
    c = resolution // 2
    yy, xx = torch.meshgrid(torch.arange(resolution, device=device),
                            torch.arange(resolution, device=device), indexing="ij")
    return ((yy - c) ** 2 + (xx - c) ** 2) <= radius ** 2


def template_constraint_loss(templates, lam1: float, lam2: float, lam3: float,
                             lowpass_radius=None, parts: bool = False):
    """Low magnitude + pairwise cosine similarity + low-frequency energy penalty.

    ``templates`` is a TemplateSet or an (n, H, W) tensor. The spectrum uses the
    unitary FFT so the low-frequency term shares the scale of the L2 norms.
    With ``parts=True`` the three weighted terms are returned as a tuple.
    """
    s = templates.templates if isinstance(templates, TemplateSet) else templates
    if any(l < 0 for l in (lam1, lam2, lam3)):
        raise ValueError("loss weights must be non-negative")
    n = s.shape[0]
    magnitude = s.flatten(1).norm(dim=1).sum()

    ortho = s.new_zeros(())
    if n > 1:
        flat = s.flatten(1)
        ii, jj = torch.triu_indices(n, n, offset=1)
        # CS is symmetric, so ordered pairs i != j count each unordered pair twice
        ortho = 2 * cosine_similarity(flat[ii], flat[jj]).sum()

    spec = torch.fft.fftshift(torch.fft.fft2(s, norm="ortho"), dim=(-2, -1))
    mask = lowpass_mask(s.shape[-1], lowpass_radius, s.device)
    kept = spec[:, mask]
    lowfreq = torch.sqrt((kept.real ** 2 + kept.imag ** 2).sum())

    terms = (lam1 * magnitude, lam2 * ortho, lam3 * lowfreq)
    return terms if parts else terms[0] + terms[1] + terms[2]


def save_templates(tset_or_tensor, path) -> None:
    s = tset_or_tensor.templates if isinstance(tset_or_tensor, TemplateSet) else tset_or_tensor
    arr = s.detach().cpu().to(torch.float32).numpy()
    n, h, w = arr.shape
    if h != w:
        raise ValueError("templates must be square")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n, h))
        fh.write(arr.astype("<f4").tobytes())


def load_templates(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, n, res = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path} is not a template file")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if body.size != n * res * res:
        raise ValueError(f"{path}: expected {n * res * res} values, found {body.size}")
    return torch.from_numpy(body.reshape(n, res, res).astype(np.float32))
