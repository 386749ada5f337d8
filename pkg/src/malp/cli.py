"""``malp`` command-line interface."""
import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import bench, trainer as T
from .data import image_folder
from .detection import detect, records_to_jsonl
from .encryption import encrypt
from .errors import ConfigError
from .image import load_image, save_image
from .manipulators import SyntheticManipulator, gt_fakeness_map, load_external_gm, load_manifest, find_entry
from .metrics import cosine_similarity, write_report


def _config(args):
    cfg = T.TrainConfig.load(args.config) if args.config else T.toy_config()
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _malp(path):
    bundle = T.load_bundle(path)
    if bundle.kind != "malp":
        raise ConfigError(f"{path} holds a {bundle.kind} checkpoint; this command needs a MaLP checkpoint")
    return bundle


def _eval_images(args, bundle):
    """Held-out images: ``--data`` if given, otherwise the validation split of the training dataset."""
    cfg = bundle.config
    if getattr(args, "data", None):
        return image_folder(args.data, cfg.resolution, args.limit)
    imgs = T.split_dataset(T._load_dataset(cfg), cfg.val_size)[1]
    return imgs, [f"val{i:05d}" for i in range(imgs.shape[0])]


def _inputs(path, resolution=None):
    p = Path(path)
    if p.is_dir():
        return image_folder(p, resolution)
    return load_image(p, resolution).unsqueeze(0), [p.stem]


def cmd_train(args):
    cfg = _config(args)
    b = T.train(cfg, out_dir=args.out)
    print(json.dumps({"checkpoint": str(b.path), **b.metrics}, sort_keys=True))


def cmd_train_passive(args):
    cfg = _config(args)
    cfg.n_templates = 0
    b = T.train_passive_baseline(cfg, out_dir=args.out)
    print(json.dumps({"checkpoint": str(b.path), **b.metrics}, sort_keys=True))


@torch.no_grad()
def cmd_encrypt(args):
    model = _malp(args.ckpt).model
    img = load_image(args.input)
    save_image(encrypt(img, model.templates, args.index), args.out)
    print(json.dumps({"out": args.out, "index": args.index, "m": model.templates.m}))


@torch.no_grad()
def cmd_localize(args):
    bundle = _malp(args.ckpt)
    model = bundle.model
    img = load_image(args.input, model.resolution)
    fmap = model.infer(img.unsqueeze(0), branch=bundle.config.eval_branch)["map"][0]
    out = args.out or str(Path(args.input).with_name(Path(args.input).stem + "_map.png"))
    save_image(fmap.expand(3, -1, -1), out)
    res = {"map": out}
    if args.real:
        gt = gt_fakeness_map(load_image(args.real, model.resolution), img)
        res["cs"] = float(cosine_similarity(fmap, gt, batched=False))
    print(json.dumps(res, sort_keys=True))


def cmd_detect(args):
    bundle = _malp(args.ckpt)
    images, ids = _inputs(args.input, bundle.model.resolution)
    text = records_to_jsonl(detect(images, bundle.model, ids, args.threshold))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args):
    bundle = _malp(args.ckpt)
    images, _ = _eval_images(args, bundle)
    res = T.evaluate(bundle.model, images, bundle.config.manipulator, seed=args.seed,
                     branch=bundle.config.eval_branch, gt_reference=bundle.config.gt_reference)
    print(json.dumps(res, sort_keys=True))


def cmd_bench(args):
    bundle = _malp(args.ckpt)
    entries = load_manifest(args.manifest)
    images = ids = None
    if args.data:
        images, ids = image_folder(args.data, None if args.scale_mode == "no_sc" else bundle.model.resolution,
                                   args.limit)
    rows = bench.run_benchmark(entries, bundle.model, args.scale_mode, images, ids, args.limit, args.seed,
                               gt_reference=bundle.config.gt_reference)
    write_report(rows, args.out)
    print(json.dumps({"report": args.out, "rows": len(rows),
                      "skipped": sum(str(r.get("status", "")).startswith("skipped") for r in rows)}))


def cmd_degrade_eval(args):
    bundle = _malp(args.ckpt)
    images, _ = _eval_images(args, bundle)
    specs = tuple(bench.DegradationSpec(k, noise_sigma=args.noise_sigma, jpeg_quality=args.jpeg_quality,
                                        seed=args.seed) for k in bench.DEGRADATION_KINDS)
    rows = bench.degrade_eval(bundle.model, images, bundle.config.manipulator, specs, seed=args.seed,
                              branch=bundle.config.eval_branch, gt_reference=bundle.config.gt_reference)
    bench.write_rows(rows, args.out, ["degradation", "n_images", "cs", "psnr", "ssim", "acc", "auc", "eer", "ap"])
    print(json.dumps({"report": args.out, "rows": len(rows)}))


def cmd_finetune_gm(args):
    bundle = _malp(args.ckpt)
    cfg = bundle.config
    if args.gm:
        if not args.manifest:
            raise ConfigError("--gm needs --manifest")
        gm = load_external_gm(find_entry(load_manifest(args.manifest), args.gm))
    else:
        gm = SyntheticManipulator("tiny_autoencoder", name="finetune_gm", seed=args.seed)
    images = T.split_dataset(T._load_dataset(cfg), cfg.val_size)[0]
    before = T.detectability(bundle.model, gm, images[:64])
    gm, history = T.finetune_gm(gm, bundle.model, images, args.mode, args.steps, args.gm_lr, args.malp_lr,
                                cfg, args.seed)
    after = T.detectability(bundle.model, gm, images[:64])
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(gm.state_dict(), out / "gm.pt")
        if history:
            bench.write_rows(history, out / "history.csv")
    print(json.dumps({"mode": args.mode, "steps": args.steps, "map_norm_before": before,
                      "map_norm_after": after}, sort_keys=True))


def cmd_report(args):
    outputs = bench.report(args.runs, args.out)
    print(json.dumps({"outputs": [str(p) for p in outputs]}))


def build_parser():
    p = argparse.ArgumentParser(prog="malp", description="Proactive manipulation localization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        return sp

    for name, fn, h in (("train", cmd_train, "train the proactive framework"),
                        ("train-passive", cmd_train_passive, "train the passive baseline")):
        sp = add(name, fn, h)
        sp.add_argument("--config", help="YAML config (defaults to the toy config)")
        sp.add_argument("--out", required=True, help="checkpoint directory")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--seed", type=int)

    sp = add("encrypt", cmd_encrypt, "add a template to an image")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--index", type=int, default=0)

    sp = add("localize", cmd_localize, "predict a fakeness map")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out")
    sp.add_argument("--real", help="original image; when given the CS against the ground-truth map is reported")

    sp = add("detect", cmd_detect, "real/fake decision per image (JSONL)")
    sp.add_argument("--in", dest="input", required=True, help="image file or directory")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out")
    sp.add_argument("--threshold", type=float, default=0.5)

    for name, fn, h in (("eval", cmd_eval, "held-out metrics"),
                        ("degrade-eval", cmd_degrade_eval, "metrics under test-time degradations")):
        sp = add(name, fn, h)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", help="folder of real images (default: validation split)")
        sp.add_argument("--limit", type=int)
        sp.add_argument("--seed", type=int, default=12345)
        if name == "degrade-eval":
            sp.add_argument("--out", required=True)
            sp.add_argument("--noise-sigma", type=float, default=1.0 / 255.0)
            sp.add_argument("--jpeg-quality", type=int, default=50)

    sp = add("bench", cmd_bench, "cross-GM benchmark from a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", default="bench.csv")
    sp.add_argument("--data", help="real images for adapters that manipulate on the fly")
    sp.add_argument("--scale-mode", choices=("sc", "no_sc"), default="sc")
    sp.add_argument("--limit", type=int, default=bench.BENCH_IMAGES)
    sp.add_argument("--seed", type=int, default=12345)

    sp = add("finetune-gm", cmd_finetune_gm, "fine-tune a differentiable GM against the framework")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--gm", help="GM name from the manifest (default: built-in tiny autoencoder)")
    sp.add_argument("--mode", choices=("freeze_malp", "joint"), default="freeze_malp")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--gm-lr", type=float, default=1e-3)
    sp.add_argument("--malp-lr", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "plots and summary for checkpoint directories")
    sp.add_argument("runs", nargs="*")
    sp.add_argument("--out", default="report")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "report" and not args.runs:
        parser.error("report needs at least one run directory")
    try:
        args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
