"""Image manipulators plugged into training and evaluation.

Every manipulator maps a (B, 3, H, W) batch in [0, 1] to a batch of the same
shape. Synthetic ones are differentiable desk-scale stand-ins for real
generative models; adapters wrap models that run outside this process.
"""
import json
import logging
import shutil
import subprocess
import tempfile
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AdapterError, ConfigError
from .image import load_image, resize_bilinear, save_image, to_grayscale

log = logging.getLogger(__name__)

SYNTHETIC_MODES = ("region_recolor", "smooth_warp", "tiny_autoencoder")
ADAPTER_TYPES = ("dir_pairs", "exec", "identity", "synthetic")


class Manipulator(nn.Module):
    differentiable = True

    def __init__(self, name):
        super().__init__()
        self.name = name
        self.frozen = False

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def forward(self, images, ids=None):
        raise NotImplementedError


class IdentityManipulator(Manipulator):
    def __init__(self, name="identity"):
        super().__init__(name)

    def forward(self, images, ids=None):
        return images


def _sample_masks(gen, b, h, w, kind, min_frac, max_frac):
    yy = torch.arange(h, dtype=torch.float32).view(h, 1)
    xx = torch.arange(w, dtype=torch.float32).view(1, w)
    masks = torch.zeros(b, 1, h, w)
    for i in range(b):
        u = torch.rand(4, generator=gen)
        mh = int(round(h * (min_frac + (max_frac - min_frac) * float(u[0]))))
        mw = int(round(w * (min_frac + (max_frac - min_frac) * float(u[1]))))
        top = int(float(u[2]) * (h - mh + 1))
        left = int(float(u[3]) * (w - mw + 1))
        if kind == "rect":
            masks[i, 0, top:top + mh, left:left + mw] = 1.0
        elif kind == "ellipse":
            cy, cx = top + (mh - 1) / 2, left + (mw - 1) / 2
            inside = ((yy - cy) / (mh / 2)) ** 2 + ((xx - cx) / (mw / 2)) ** 2 <= 1.0
            masks[i, 0][inside] = 1.0
        else:
            raise ValueError(f"unknown mask kind {kind!r}")
    return masks


class SyntheticManipulator(Manipulator):
    """Partial manipulation confined to a binary region.

    Modes:
      * ``region_recolor``: blends masked pixels towards ``color`` by ``strength``.
      * ``smooth_warp``: replaces masked pixels with a smoothly displaced copy
        (displacement amplitude ``strength * 8`` pixels).
      * ``tiny_autoencoder``: region_recolor with learnable colour and strength
        plus a masked residual conv net (zero-initialised, so it starts out
        identical to region_recolor). This is the mode used for GM fine-tuning.

    The region is either a fixed ``mask`` (H, W) or random ``mask_kind`` shapes
    drawn per image from a generator seeded with ``seed``; call :meth:`reseed`
    to replay the same sequence.
    """

    def __init__(self, mode="region_recolor", name=None, mask=None, mask_kind="rect",
                 strength=0.6, color=(0.9, 0.2, 0.2), seed=0, min_frac=0.25, max_frac=0.6):
        super().__init__(name or f"synthetic_{mode}")
        if mode not in SYNTHETIC_MODES:
            raise ValueError(f"unknown synthetic mode {mode!r}; expected one of {SYNTHETIC_MODES}")
        self.mode = mode
        self.mask_kind = mask_kind
        self.min_frac, self.max_frac = min_frac, max_frac
        self.seed = seed
        self.strength = float(strength)
        self.register_buffer("color", torch.tensor(color, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("mask", None if mask is None else torch.as_tensor(mask, dtype=torch.float32))
        self._gen = torch.Generator().manual_seed(seed)
        if mode == "tiny_autoencoder":
            s = min(max(self.strength, 1e-3), 1 - 1e-3)
            self.strength_logit = nn.Parameter(torch.logit(torch.tensor(s)))
            self.color_logit = nn.Parameter(torch.logit(self.color.clamp(1e-3, 1 - 1e-3).clone()))
            self.residual = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
                                          nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
                                          nn.Conv2d(16, 3, 3, padding=1))
            nn.init.zeros_(self.residual[-1].weight)
            nn.init.zeros_(self.residual[-1].bias)

    def reseed(self, seed=None):
        self._gen.manual_seed(self.seed if seed is None else seed)
        return self

    def masks_for(self, b, h, w, device=None):
        if self.mask is not None:
            m = self.mask
            if m.shape[-2:] != (h, w):
                m = (resize_bilinear(m.view(1, 1, *m.shape[-2:]), h, w) > 0.5).float()
            return m.view(1, 1, h, w).expand(b, 1, h, w).to(device)
        return _sample_masks(self._gen, b, h, w, self.mask_kind, self.min_frac, self.max_frac).to(device)

    def forward(self, images, ids=None, masks=None):
        b, _, h, w = images.shape
        if masks is None:
            masks = self.masks_for(b, h, w, images.device)
        masks = masks.to(images.dtype)
        if self.mode == "region_recolor":
            edited = images + self.strength * (self.color.to(images.dtype) - images)
        elif self.mode == "smooth_warp":
            edited = self._warp(images)
        else:
            s = torch.sigmoid(self.strength_logit)
            c = torch.sigmoid(self.color_logit)
            edited = images + s * (c - images) + self.residual(images * 2 - 1)
        out = images + masks * (edited - images)
        return out.clamp(0.0, 1.0)

    def _warp(self, images):
        b, _, h, w = images.shape
        coarse = torch.randn(b, 2, 4, 4, generator=self._gen).to(images)
        flow = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=False)
        flow = flow * (self.strength * 8.0) * torch.tensor([2.0 / w, 2.0 / h]).view(1, 2, 1, 1).to(images)
        ys, xs = torch.meshgrid(torch.linspace(-1, 1, h), torch.linspace(-1, 1, w), indexing="ij")
        grid = torch.stack((xs, ys), dim=-1).to(images).unsqueeze(0) + flow.permute(0, 2, 3, 1)
        return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=True)


class DirPairsAdapter(Manipulator):
    """Looks up pre-manipulated images by id in ``<path>/fake/<id>.png``.

    The matching originals live in ``<path>/real/<id>.png``.
    """

    differentiable = False

    def __init__(self, name, path, resolution=None):
        super().__init__(name)
        self.root = Path(path)
        self.resolution = resolution
        for sub in ("real", "fake"):
            if not (self.root / sub).is_dir():
                raise ConfigError(f"{name}: missing directory {self.root / sub}")
        real_ids = {p.stem for p in (self.root / "real").glob("*.png")}
        fake_ids = {p.stem for p in (self.root / "fake").glob("*.png")}
        self.ids = sorted(real_ids & fake_ids)
        if not self.ids:
            raise ConfigError(f"{name}: no matching real/fake pairs under {self.root}")

    def __len__(self):
        return len(self.ids)

    def real(self, ident):
        return load_image(self.root / "real" / f"{ident}.png")

    def fake(self, ident):
        return load_image(self.root / "fake" / f"{ident}.png")

    def forward(self, images, ids=None):
        if ids is None:
            raise AdapterError(self.name, "directory-pair lookups need image ids")
        outs = []
        for ident in ids:
            if ident not in self.ids:
                raise AdapterError(self.name, f"no manipulated image for id {ident!r}")
            fake = self.fake(ident)
            if fake.shape[-2:] != images.shape[-2:]:
                raise AdapterError(self.name, f"resolution mismatch for {ident}: "
                                   f"{tuple(fake.shape[-2:])} vs {tuple(images.shape[-2:])}")
            outs.append(fake)
        return torch.stack(outs).to(images)


class ExecAdapter(Manipulator):
    """Runs ``<path> <in_dir> <out_dir>``; the program must write ``<id>.png`` for every input."""

    differentiable = False

    def __init__(self, name, path, timeout=600):
        super().__init__(name)
        self.path = str(path)
        self.timeout = timeout
        if shutil.which(self.path) is None and not Path(self.path).is_file():
            raise ConfigError(f"{name}: adapter executable {self.path} not found")

    @torch.no_grad()
    def forward(self, images, ids=None):
        ids = ids or [f"{i:05d}" for i in range(images.shape[0])]
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp, "in"), Path(tmp, "out")
            src.mkdir()
            dst.mkdir()
            for ident, img in zip(ids, images):
                save_image(img, src / f"{ident}.png")
            try:
                subprocess.run([self.path, str(src), str(dst)], check=True, timeout=self.timeout,
                               capture_output=True)
            except (subprocess.SubprocessError, OSError) as exc:
                raise AdapterError(self.name, f"adapter failed: {exc}") from exc
            outs = []
            for ident in ids:
                p = dst / f"{ident}.png"
                if not p.exists():
                    raise AdapterError(self.name, f"adapter produced no output for {ident}")
                out = load_image(p)
                if out.shape[-2:] != images.shape[-2:]:
                    raise AdapterError(self.name, f"resolution mismatch for {ident}: "
                                       f"{tuple(out.shape[-2:])} vs {tuple(images.shape[-2:])}")
                outs.append(out)
        return torch.stack(outs).to(images)


def manipulate(handle: Manipulator, images, ids=None):
    if not handle.frozen:
        raise RuntimeError(f"manipulator {handle.name} must be frozen before use")
    single = images.dim() == 3
    out = handle(images.unsqueeze(0) if single else images, ids=ids)
    if out.shape[-2:] != images.shape[-2:]:
        raise AdapterError(handle.name, "output resolution differs from input")
    return out.squeeze(0) if single else out


def gt_fakeness_map(real, manipulated, size=None):
    """Gray-scale absolute difference between the original and manipulated image.

    Inputs are (3, H, W) or (B, 3, H, W) in [0, 1]; ``size`` optionally resizes
    the map to size x size.
    """
    if real.shape != manipulated.shape:
        raise ValueError(f"shape mismatch: {tuple(real.shape)} vs {tuple(manipulated.shape)}")
    m = to_grayscale((real - manipulated).abs())
    if size is not None:
        m = resize_bilinear(m, size, size)
    return m.clamp(0.0, 1.0)


def load_manifest(path):
    """Parse a benchmark manifest: a JSON list of GM entries."""
    try:
        entries = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"manifest {path} must be a JSON list")
    for entry in entries:
        _validate_entry(entry)
    return entries


def _validate_entry(entry):
    if not isinstance(entry, dict) or "gm_name" not in entry or "adapter" not in entry:
        raise ConfigError(f"manifest entry needs gm_name and adapter: {entry!r}")
    kind = entry["adapter"].get("type")
    if kind not in ADAPTER_TYPES:
        raise ConfigError(f"unknown adapter type {kind!r} in entry {entry!r}")
    if kind in ("dir_pairs", "exec") and not entry["adapter"].get("path"):
        raise ConfigError(f"adapter path missing in entry {entry!r}")
    if entry.get("domain", "generic") not in ("face", "generic"):
        raise ConfigError(f"domain must be 'face' or 'generic' in entry {entry!r}")


def find_entry(entries, gm_name):
    for entry in entries:
        if entry["gm_name"] == gm_name:
            return entry
    raise ConfigError(f"unknown GM {gm_name!r}; manifest lists {[e['gm_name'] for e in entries]}")


def load_external_gm(entry) -> Manipulator:
    """Build a frozen manipulator handle from one manifest entry."""
    _validate_entry(entry)
    name, adapter = entry["gm_name"], entry["adapter"]
    kind = adapter["type"]
    if kind == "dir_pairs":
        if not Path(adapter["path"]).is_dir():
            raise ConfigError(f"{name}: directory {adapter['path']} does not exist (entry {entry!r})")
        handle = DirPairsAdapter(name, adapter["path"], entry.get("resolution"))
    elif kind == "exec":
        handle = ExecAdapter(name, adapter["path"])
    elif kind == "identity":
        handle = IdentityManipulator(name)
    else:
        params = dict(adapter.get("params", {}))
        if "color" in params:
            params["color"] = tuple(params["color"])
        handle = SyntheticManipulator(name=name, **params)
    return handle.freeze()
