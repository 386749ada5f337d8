"""Cross-GM benchmark, test-time degradations and run reports."""
import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import metrics as M
from .detection import fused_score, recovered_similarity
from .encryption import encrypt, select_random_index
from .errors import AdapterError, ConfigError
from .image import clamp01, resize_bilinear
from .manipulators import DirPairsAdapter, gt_fakeness_map, load_external_gm, manipulate

log = logging.getLogger(__name__)

DEGRADATION_KINDS = ("jpeg", "blur", "noise", "lowres")
BENCH_IMAGES = 200


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    jpeg_quality: int = 50
    blur_kernel: int = 7
    # OpenCV's default for a 7-tap kernel: 0.3 * ((k - 1) / 2 - 1) + 0.8
    blur_sigma: float = 1.4
    # unit variance on the 0-255 scale
    noise_sigma: float = 1.0 / 255.0
    lowres_factor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(f"unsupported degradation {self.kind!r}; choose from {DEGRADATION_KINDS}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must be in [1, 100]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")
        if self.noise_sigma < 0 or self.blur_sigma <= 0:
            raise ValueError("noise_sigma must be >= 0 and blur_sigma > 0")
        if self.lowres_factor < 1:
            raise ValueError("lowres_factor must be >= 1")


DEFAULT_DEGRADATIONS = tuple(DegradationSpec(k) for k in DEGRADATION_KINDS)


def _jpeg(img, quality):
    arr = (img.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    out = torch.from_numpy(np.asarray(Image.open(buf).convert("RGB")).copy())
    return out.permute(2, 0, 1).to(img.dtype) / 255.0


def _blur(x, k, sigma):
    r = torch.arange(k, dtype=x.dtype) - (k - 1) / 2
    g = torch.exp(-r ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    c = x.shape[1]
    x = F.pad(x, (k // 2,) * 4, mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, g.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def apply_degradation(img, spec: DegradationSpec, gen=None):
    """Apply one degradation to a (3, H, W) or (B, 3, H, W) image in [0, 1]; the shape is preserved."""
    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    if spec.kind == "jpeg":
        out = torch.stack([_jpeg(im, spec.jpeg_quality) for im in x])
    elif spec.kind == "blur":
        out = _blur(x, spec.blur_kernel, spec.blur_sigma)
    elif spec.kind == "noise":
        if spec.noise_sigma == 0:
            out = x.clone()
        else:
            gen = gen or torch.Generator().manual_seed(spec.seed)
            out = x + spec.noise_sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    else:
        h, w = x.shape[-2:]
        small = resize_bilinear(x, max(1, h // spec.lowres_factor), max(1, w // spec.lowres_factor))
        out = resize_bilinear(small, h, w)
    out = clamp01(out)
    return out.squeeze(0) if single else out


def degradation_fn(spec: DegradationSpec):
    """Batch callable with its own seeded stream, suitable for :func:`malp.trainer.evaluate`."""
    gen = torch.Generator().manual_seed(spec.seed)
    return lambda batch: apply_degradation(batch, spec, gen)


def degrade_eval(model, images, manipulator, specs=DEFAULT_DEGRADATIONS, seed=12345, branch="cnn",
                 gt_reference="original"):
    """One row of metrics per degradation, preceded by the clean ("none") row."""
    from .trainer import evaluate

    rows = [{"degradation": "none", **evaluate(model, images, manipulator, seed=seed, branch=branch,
                                               gt_reference=gt_reference)}]
    for spec in specs:
        res = evaluate(model, images, manipulator, seed=seed, degradation=degradation_fn(spec), branch=branch,
                       gt_reference=gt_reference)
        rows.append({"degradation": spec.kind, **res})
    return rows


def write_rows(rows, path, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: M._fmt(r.get(k, "")) for k in columns})


# benchmark ------------------------------------------------------------------

def _real_images(handle, images, ids, limit):
    if isinstance(handle, DirPairsAdapter):
        chosen = handle.ids[:limit]
        return torch.stack([handle.real(i) for i in chosen]), chosen
    if images is None:
        raise ConfigError(f"{handle.name}: this adapter needs real images (pass --data)")
    ids = ids or [f"{i:05d}" for i in range(images.shape[0])]
    return images[:limit], list(ids[:limit])


@torch.no_grad()
def bench_gm(model, handle, real, ids, scale_mode="sc", seed=12345, chunk=16, gt_reference="original"):
    """Metrics for one GM.

    ``sc`` resizes inputs to the model resolution. ``no_sc`` keeps the native
    resolution and lets the template be upsampled to it. Pre-computed pairs were
    produced from unencrypted originals, so for them the manipulated image is used as is.
    """
    if scale_mode not in ("sc", "no_sc"):
        raise ValueError(f"scale_mode must be 'sc' or 'no_sc', got {scale_mode!r}")
    model.eval()
    tset = model.templates
    gen = torch.Generator().manual_seed(seed)
    if hasattr(handle, "reseed"):
        handle.reseed(seed)
    precomputed = isinstance(handle, DirPairsAdapter)
    r = model.resolution
    cs, ps, ss, scores, labels, degenerate = [], [], [], [], [], 0
    for start in range(0, real.shape[0], chunk):
        x, bid = real[start:start + chunk], ids[start:start + chunk]
        b = x.shape[0]
        idx = select_random_index(tset, gen, size=b)
        if precomputed:
            fake = manipulate(handle, x, bid)
            if scale_mode == "sc":
                x, fake = resize_bilinear(x, r, r), resize_bilinear(fake, r, r)
            enc = encrypt(x, tset, idx)
        else:
            if scale_mode == "sc":
                x = resize_bilinear(x, r, r)
            enc = encrypt(x, tset, idx)
            fake = manipulate(handle, enc, bid)
        gt = gt_fakeness_map(x if gt_reference == "original" else enc, fake)
        if not precomputed:
            # a GM that returned its input untouched manipulated nothing
            untouched = (fake == enc).flatten(1).all(1)
            gt = torch.where(untouched.view(-1, 1, 1, 1), torch.zeros_like(gt), gt)
        out = model.infer(torch.cat([enc, fake]))
        pf = out["map"][b:]
        degenerate += int((gt.flatten(1).norm(dim=1) == 0).sum())
        cs.extend(M.cosine_similarity(pf, gt).tolist())
        ps.extend(M.psnr(pf[i], gt[i]) for i in range(b))
        ss.extend(M.ssim(pf, gt).tolist() if min(gt.shape[-2:]) >= M.SSIM_WINDOW else [math.nan] * b)
        cs_rec = recovered_similarity(out["recovered"], tset.templates)
        scores.extend(fused_score(out["logit"], cs_rec).tolist())
        labels.extend([1] * b + [0] * b)
    n = len(cs)
    row = {"gm_name": handle.name, "n_images": n, "cs": sum(cs) / n, "psnr": sum(ps) / n,
           "ssim": sum(ss) / n, "acc": M.accuracy(scores, labels), "auc": M.auc(scores, labels),
           "eer": M.eer(scores, labels),
           "ap": M.average_precision([1 - s for s in scores], [1 - y for y in labels]),
           "status": "ok"}
    if degenerate:
        row["status"] = f"degenerate:{degenerate}/{n} zero ground-truth maps"
    return row


def run_benchmark(entries, model, scale_mode="sc", images=None, ids=None, limit=BENCH_IMAGES, seed=12345,
                  gt_reference="original"):
    """Evaluate every manifest entry; broken entries yield a warning row instead of an exception."""
    rows = []
    for entry in entries:
        name = entry.get("gm_name", "?")
        try:
            handle = load_external_gm(entry)
            real, rid = _real_images(handle, images, ids, limit)
            rows.append(bench_gm(model, handle, real, rid, scale_mode, seed, gt_reference=gt_reference))
        except (ConfigError, AdapterError, OSError, ValueError) as exc:
            msg = " ".join(str(exc).split())
            warnings.warn(f"skipping GM {name}: {msg}", RuntimeWarning)
            rows.append({"gm_name": name, "n_images": 0, "status": f"skipped:{msg}"})
    return sorted(rows, key=lambda r: r["gm_name"])


# reports --------------------------------------------------------------------

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


@torch.no_grad()
def map_grid(bundle, images, path, n_rows=4, seed=12345):
    """Side-by-side panels per image: real, encrypted, manipulated, ground truth, prediction."""
    from .trainer import _eval_gm, build_manipulator

    plt = _plt()
    model, cfg = bundle.model, bundle.config
    x = images[:n_rows]
    gm = _eval_gm(build_manipulator(cfg.manipulator), seed)
    gen = torch.Generator().manual_seed(seed)
    enc = encrypt(x, model.templates, select_random_index(model.templates, gen, size=x.shape[0]))
    fake = gm(enc)
    gt = gt_fakeness_map(x, fake)
    pred = model.infer(fake, branch=cfg.eval_branch)["map"]
    titles = ["real", "encrypted", "manipulated", "GT map", "predicted"]
    fig, axes = plt.subplots(x.shape[0], 5, figsize=(10, 2 * x.shape[0]), squeeze=False)
    for i in range(x.shape[0]):
        panels = [x[i], enc[i], fake[i], gt[i], pred[i]]
        for j, p in enumerate(panels):
            ax = axes[i][j]
            if p.shape[0] == 3:
                ax.imshow(p.permute(1, 2, 0).clamp(0, 1).numpy())
            else:
                ax.imshow(p[0].numpy(), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


SWEEP_PARAMS = {"m": "template strength m", "n_templates": "template set size"}


def report(run_dirs, out_dir, images=None):
    """Summarise checkpoint directories: summary.csv, one map grid per run and sweep plots.

    A sweep plot is drawn for every parameter in ``SWEEP_PARAMS`` that takes
    more than one value across the runs while the other parameter stays fixed.
    """
    from .trainer import _load_dataset, load_bundle, split_dataset

    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    for rd in run_dirs:
        bundle = load_bundle(rd)
        cfg = bundle.config
        row = {"run": str(rd), "kind": bundle.kind, "m": cfg.m, "n_templates": cfg.n_templates,
               **{k: bundle.metrics.get(k, "") for k in ("cs", "psnr", "ssim", "acc", "auc", "eer", "ap")}}
        rows.append(row)
        if bundle.kind == "malp":
            imgs = images
            if imgs is None:
                imgs = split_dataset(_load_dataset(cfg), cfg.val_size)[1]
            grid = out / f"maps_{Path(rd).name}.png"
            map_grid(bundle, imgs, grid)
            outputs.append(grid)
    rows.sort(key=lambda r: r["run"])
    write_rows(rows, out / "summary.csv")
    outputs.insert(0, out / "summary.csv")

    plt = _plt()
    for param, label in SWEEP_PARAMS.items():
        other = [p for p in SWEEP_PARAMS if p != param]
        sweep = [r for r in rows if isinstance(r["cs"], float)]
        if len({r[param] for r in sweep}) < 2 or any(len({r[o] for r in sweep}) > 1 for o in other):
            continue
        sweep.sort(key=lambda r: r[param])
        xs = [r[param] for r in sweep]
        fig, ax = plt.subplots(figsize=(4, 3))
        for metric in ("cs", "acc"):
            ys = [r[metric] for r in sweep if isinstance(r[metric], float)]
            if len(ys) == len(xs):
                ax.plot(xs, ys, marker="o", label=metric)
        ax.set_xlabel(label)
        ax.set_ylabel("metric")
        ax.legend()
        fig.tight_layout()
        path = out / f"sweep_{param}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        outputs.append(path)
    return outputs

