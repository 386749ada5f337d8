"""Localization and detection metrics.

Map similarities (``cosine_similarity``, ``ssim``, ``psnr``) are differentiable
torch functions and double as loss building blocks. Ranking metrics take plain
score / label arrays where label 1 is the positive class.
"""
import csv
import math

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0

REPORT_COLUMNS = ["gm_name", "n_images", "cs", "psnr", "ssim", "acc", "auc", "eer", "ap", "status"]


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, batched: bool = True) -> torch.Tensor:
    """Cosine similarity of flattened arrays; 0 when either side is a zero vector.

    With ``batched=True`` the leading axis indexes samples and one value per
    sample is returned, otherwise both inputs are flattened completely.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if batched and a.dim() > 1:
        a, b = a.flatten(1), b.flatten(1)
    else:
        a, b = a.flatten(), b.flatten()
    dot = (a * b).sum(-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    ok = denom != 0  # NaN passes through instead of masquerading as a zero vector
    safe = torch.where(ok, denom, torch.ones_like(denom))
    return torch.where(ok, dot / safe, torch.zeros_like(dot))


def gaussian_kernel_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float32, device=None):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Mean SSIM over all fully-contained Gaussian windows.

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(B, C, H, W)``; batched input returns
    one value per sample, otherwise a scalar.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window_size:
        raise ValueError(f"maps of size {tuple(a.shape[-2:])} are smaller than the {window_size}x{window_size} window")
    squeeze = a.dim() < 4
    while a.dim() < 4:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    channels = a.shape[1]
    g = gaussian_kernel_1d(window_size, sigma, a.dtype, a.device)
    k = 5 * channels
    # the Gaussian window is separable: filter rows then columns, all five moments in one grouped pass
    x = torch.cat([a, b, a * a, b * b, a * b], dim=1)
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(k, 1, 1, window_size), groups=k)
    x = F.conv2d(x, g.view(1, 1, -1, 1).expand(k, 1, window_size, 1), groups=k)
    mu_a, mu_b, e_aa, e_bb, e_ab = x.split(channels, dim=1)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    per_sample = (num / den).flatten(1).mean(1)
    return per_sample[0] if squeeze else per_sample


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for unit dynamic range, capped for (near-)identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if (y == 1).sum() == 0 or (y == 0).sum() == 0:
        raise ValueError("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney probability, ties credited 0.5."""
    s, y = _scores_labels(scores, labels)
    pos, neg = s[y == 1], np.sort(s[y == 0])
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # half-integers sum exactly in float64
    wins = float(np.sum(below + 0.5 * (at_or_below - below)))
    return wins / (len(pos) * len(neg))


def eer(scores, labels) -> float:
    """Equal error rate from a sweep over the unique scores.

    Items scoring at or above the threshold are called positive. The crossing
    of FPR and FNR is linearly interpolated between adjacent thresholds.
    """
    s, y = _scores_labels(scores, labels)
    n_pos, n_neg = (y == 1).sum(), (y == 0).sum()
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores (descending order)
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(y_sorted == 1)[ends]
    fp = np.cumsum(y_sorted == 0)[ends]
    # thresholds from +inf down to the minimum score
    fpr = np.r_[0.0, fp / n_neg]
    fnr = np.r_[1.0, 1.0 - tp / n_pos]
    diff = fpr - fnr  # non-decreasing along the sweep
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(fpr[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(fpr[k - 1] + alpha * (fpr[k] - fpr[k - 1]))


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over thresholds of recall increments times precision."""
    s, y = _scores_labels(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(y_sorted == 1)[ends].astype(np.float64)
    fp = np.cumsum(y_sorted == 0)[ends].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def accuracy(scores, labels, threshold=0.5) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    return float(np.mean((s >= threshold).astype(int) == y))


def write_report(rows, path):
    """Write metric rows (dicts keyed by ``REPORT_COLUMNS``) sorted by GM name."""
    rows = sorted(rows, key=lambda r: r["gm_name"])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in REPORT_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v
