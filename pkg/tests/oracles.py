"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np
import torch


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def rates_at(scores, labels, t):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    fpr = sum(1 for s in neg if s >= t) / len(neg)
    fnr = sum(1 for s in pos if s < t) / len(pos)
    return fpr, fnr


def eer_sweep(scores, labels):
    """Evaluate every threshold (each unique score plus +inf) and intersect FPR with FNR."""
    thresholds = [math.inf] + sorted(set(scores), reverse=True)
    pts = [rates_at(scores, labels, t) for t in thresholds]
    best = min(range(len(pts)), key=lambda i: abs(pts[i][0] - pts[i][1]))
    if pts[best][0] == pts[best][1]:
        return pts[best][0]
    for (f0, n0), (f1, n1) in zip(pts, pts[1:]):
        d0, d1 = f0 - n0, f1 - n1
        if d0 < 0 <= d1:
            # segment from (f0, n0) to (f1, n1) meets the diagonal fpr == fnr
            a = d0 / (d0 - d1)
            return f0 + a * (f1 - f0)
    raise AssertionError("no crossing found")


def ap_bruteforce(scores, labels):
    total_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        recall = tp / total_pos
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def ssim_single_window(a, b, sigma=1.5, c1=1e-4, c2=9e-4):
    """SSIM of one window covering the whole (odd-sized, square) patch."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    k = a.shape[0]
    r = (k - 1) / 2
    w = np.array([[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma ** 2)) for j in range(k)] for i in range(k)])
    w /= w.sum()
    mu_a, mu_b = (w * a).sum(), (w * b).sum()
    va = (w * (a - mu_a) ** 2).sum()
    vb = (w * (b - mu_b) ** 2).sum()
    cov = (w * (a - mu_a) * (b - mu_b)).sum()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar f at float64 tensor x."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def gradient_relative_error(f, x, eps=1e-6):
    """Relative L2 error between autograd and central-difference gradients of scalar f at x."""
    x = x.detach().clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(f(x), x)
    numeric = central_difference(lambda t: f(t).detach(), x.detach().clone(), eps)
    return float((analytic - numeric).norm() / numeric.norm().clamp_min(1e-30))
