"""Two-branch fakeness-map estimation: shared CNN trunk + shallow head, a ViT branch,
and a classifier on predicted maps."""
import warnings
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .metrics import SSIM_WINDOW, cosine_similarity, ssim


@dataclass
class ArchConfig:
    # trunk: stem output width followed by the four block widths
    trunk_widths: tuple = (32, 32, 64, 64, 128)
    # heads (E_C and E_E): stem output width followed by three block widths
    head_widths: tuple = (64, 64, 32, 32)
    stem_kernel: int = 7
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    dropout: float = 0.1
    # classifier: stem width followed by eight block widths, then the FC hidden sizes
    classifier_widths: tuple = (16, 16, 32, 32, 64, 64, 64, 64, 64)
    classifier_fc: tuple = (64, 32)

    def __post_init__(self):
        self.trunk_widths = tuple(self.trunk_widths)
        self.head_widths = tuple(self.head_widths)
        self.classifier_widths = tuple(self.classifier_widths)
        self.classifier_fc = tuple(self.classifier_fc)
        if len(self.trunk_widths) != 5:
            raise ValueError("trunk_widths needs a stem width and 4 block widths")
        if len(self.head_widths) != 4:
            raise ValueError("head_widths needs a stem width and 3 block widths")
        if len(self.classifier_widths) != 9:
            raise ValueError("classifier_widths needs a stem width and 8 block widths")
        if len(self.classifier_fc) != 2:
            raise ValueError("classifier_fc lists the two hidden FC sizes")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    def to_dict(self):
        return asdict(self)


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _to_signed(x):
    return x * 2.0 - 1.0


class SharedTrunk(nn.Module):
    """Stem convolution plus four conv-BN-ReLU blocks, full resolution throughout."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.trunk_widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], arch.stem_kernel, padding=arch.stem_kernel // 2),
                                  nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[conv_block(w[i], w[i + 1]) for i in range(4)])
        self.out_channels = w[-1]

    def forward(self, img):
        _check_rgb(img)
        return self.blocks(self.stem(_to_signed(img)))


class ConvHead(nn.Module):
    """Stem + three blocks + 1x1 projection down to a single channel.

    Used both as the shallow localization head (``sigmoid=True``) and as the
    template-recovery encoder head (raw output).
    """

    def __init__(self, in_channels, arch: ArchConfig, sigmoid: bool):
        super().__init__()
        w = arch.head_widths
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w[0], 3, padding=1), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[conv_block(w[i], w[i + 1]) for i in range(3)])
        self.out = nn.Conv2d(w[-1], 1, 1)
        self.sigmoid = sigmoid

    def forward(self, feats):
        y = self.out(self.blocks(self.stem(feats)))
        return torch.sigmoid(y) if self.sigmoid else y


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.drop = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout),
                                 nn.Linear(hidden, dim), nn.Dropout(dropout))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, h, need_weights=False)[0])
        return x + self.mlp(self.norm2(x))


class TransformerBranch(nn.Module):
    """ViT over non-overlapping patches; each token decodes its own patch of the map."""

    def __init__(self, resolution, arch: ArchConfig):
        super().__init__()
        p = arch.patch_size
        if resolution % p:
            raise ValueError(f"patch size {p} does not divide resolution {resolution}")
        self.resolution = resolution
        self.patch = p
        self.grid = resolution // p
        self.embed = nn.Conv2d(3, arch.embed_dim, p, stride=p)
        self.pos = nn.Parameter(torch.zeros(1, self.grid * self.grid, arch.embed_dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.pos_drop = nn.Dropout(arch.dropout)
        self.blocks = nn.Sequential(*[EncoderBlock(arch.embed_dim, arch.num_heads, arch.mlp_ratio, arch.dropout)
                                      for _ in range(arch.depth)])
        self.norm = nn.LayerNorm(arch.embed_dim)
        self.decode = nn.Linear(arch.embed_dim, p * p)

    def forward(self, img):
        _check_rgb(img, self.resolution)
        b = img.shape[0]
        tokens = self.embed(_to_signed(img)).flatten(2).transpose(1, 2)
        tokens = self.blocks(self.pos_drop(tokens + self.pos))
        patches = self.decode(self.norm(tokens))  # (B, N, p*p)
        g, p = self.grid, self.patch
        m = patches.view(b, g, g, p, p).permute(0, 1, 3, 2, 4).reshape(b, 1, g * p, g * p)
        return torch.sigmoid(m)


class MapClassifier(nn.Module):
    """Real-vs-fake logit from a fakeness map: stem, eight conv blocks, three FC layers."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        w = arch.classifier_widths
        self.stem = nn.Sequential(nn.Conv2d(1, w[0], 3, padding=1), nn.ReLU(inplace=True))
        # every second block halves the resolution
        self.blocks = nn.Sequential(*[conv_block(w[i], w[i + 1], stride=2 if i % 2 else 1) for i in range(8)])
        self.pool = nn.AdaptiveAvgPool2d(1)
        f1, f2 = arch.classifier_fc
        self.fc = nn.Sequential(nn.Linear(w[-1], f1), nn.ReLU(inplace=True),
                                nn.Linear(f1, f2), nn.ReLU(inplace=True),
                                nn.Linear(f2, 1))

    def forward(self, fmap):
        if fmap.dim() != 4 or fmap.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) maps, got {tuple(fmap.shape)}")
        if torch.isnan(fmap).any():
            raise ValueError("fakeness map contains NaN values")
        z = self.pool(self.blocks(self.stem(_to_signed(fmap)))).flatten(1)
        return self.fc(z).squeeze(1)


def _check_rgb(img, resolution=None):
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(img.shape)}")
    if resolution is not None and tuple(img.shape[-2:]) != (resolution, resolution):
        raise ValueError(f"expected {resolution}x{resolution} images, got {tuple(img.shape[-2:])}")


def count_conv_layers(*modules):
    return sum(isinstance(m, nn.Conv2d) for mod in modules for m in mod.modules())


def localization_loss(pred, gt, is_encrypted, lam4, lam5, lam6, lam7, ssim_window=SSIM_WINDOW):
    """Localization objective averaged over the batch.

    Encrypted samples: ``lam4 * ||pred||^2 + lam5 * CS(pred, gt)``, pushing the
    map to zero and away from the paired ground truth. Manipulated samples:
    ``lam6 * (1 - CS) + lam7 * (1 - SSIM)``. ``is_encrypted`` is a bool or a
    per-sample bool tensor. Manipulated samples with an all-zero ground truth
    drop the CS term and raise a warning.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.dim() == 2:
        pred, gt = pred[None, None], gt[None, None]
    elif pred.dim() == 3:
        pred, gt = pred.unsqueeze(1), gt.unsqueeze(1)
    b = pred.shape[0]
    enc = torch.as_tensor(is_encrypted, dtype=torch.bool, device=pred.device).expand(b)
    cs = cosine_similarity(pred, gt)

    enc_loss = lam4 * pred.pow(2).flatten(1).sum(1) + lam5 * cs
    degenerate = gt.flatten(1).abs().sum(1) == 0
    if (degenerate & ~enc).any():
        warnings.warn("all-zero ground-truth map for a manipulated sample; CS term skipped",
                      RuntimeWarning, stacklevel=2)
    cs_term = torch.where(degenerate, torch.zeros_like(cs), lam6 * (1 - cs))
    fake_loss = cs_term + lam7 * (1 - ssim(pred, gt, window_size=ssim_window))
    return torch.where(enc, enc_loss, fake_loss).mean()
