"""End-to-end acceptance checks at desk scale.

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting. Trained toy runs are cached per module so several criteria share
them; the full file takes on the order of an hour or two on one CPU core.
"""
import copy
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from malp import metrics as M
from malp.bench import DEGRADATION_KINDS, degrade_eval
from malp.detection import fused_bce, fused_score, recovery_loss
from malp.encryption import init_template_set, load_templates, save_templates, template_constraint_loss
from malp.localization import localization_loss
from malp.manipulators import SyntheticManipulator
from malp.trainer import (Trainer, _load_dataset, detectability, evaluate, evaluate_passive, finetune_gm,
                          load_bundle, save_bundle, split_dataset, toy_config, train, train_passive_baseline)
from oracles import auc_pairwise, eer_sweep, gradient_relative_error, ssim_single_window
from test_trainer import tiny

LAMBDAS = toy_config().lambdas
SEEDS = (0, 1, 2)
UNSEEN_GM = {"type": "synthetic", "params": {"mode": "region_recolor", "mask_kind": "ellipse", "strength": 0.6,
                                             "color": [0.2, 0.2, 0.9], "seed": 99}}


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


# shared toy runs ------------------------------------------------------------

_RUNS = {}


def toy_run(**overrides):
    defaults = toy_config()
    key = tuple(sorted((k, v) for k, v in overrides.items() if getattr(defaults, k) != v))
    if key not in _RUNS:
        t = time.time()
        bundle = train(toy_config(**overrides))
        bundle.seconds = time.time() - t
        _RUNS[key] = bundle
    return _RUNS[key]


@pytest.fixture(scope="module")
def validation():
    cfg = toy_config()
    return split_dataset(_load_dataset(cfg), cfg.val_size)


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradients():
    t = time.time()
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) * 0.8 + 0.1
    gt = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    templates = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    recovered = torch.randn(2, 8, 8, generator=g, dtype=torch.float64)
    logit = torch.randn(4, generator=g, dtype=torch.float64)
    cs = torch.rand(4, generator=g, dtype=torch.float64) * 0.8 + 0.1
    labels = torch.tensor([1.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    lam = LAMBDAS
    # SSIM is evaluated over valid windows, so an 8x8 map needs a window no larger than 8
    checks = {
        "J_T": gradient_relative_error(lambda s: template_constraint_loss(s, *lam[0:3]), templates),
        "J_L enc": gradient_relative_error(lambda p: localization_loss(p, gt, True, *lam[3:7], ssim_window=7), pred),
        "J_L fake": gradient_relative_error(lambda p: localization_loss(p, gt, False, *lam[3:7], ssim_window=7),
                                            pred),
        "J_R enc": gradient_relative_error(lambda r: recovery_loss(r, templates, 1, True, *lam[7:9]), recovered),
        "J_R fake": gradient_relative_error(lambda r: recovery_loss(r, templates, 1, False, *lam[7:9]), recovered),
        "J_C logit": gradient_relative_error(lambda z: fused_bce(fused_score(z, cs), labels, lam[9]), logit),
        "J_C cs": gradient_relative_error(lambda c: fused_bce(fused_score(logit, c), labels, lam[9]), cs),
    }
    worst = max(checks.values())
    elapsed = time.time() - t
    record(1, worst < 1e-4 and elapsed < 60,
           f"max rel. error {worst:.2e} (< 1e-4) over {len(checks)} gradients in {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_metric_oracles():
    t = time.time()
    rng = np.random.default_rng(2024)
    auc_ok = eer_ok = True
    eer_dev = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        s = np.round(rng.random(n), int(rng.integers(1, 4))).tolist()
        y = rng.integers(0, 2, n).tolist()
        y[0], y[1] = 0, 1
        auc_ok &= M.auc(s, y) == auc_pairwise(s, y)
        eer_dev = max(eer_dev, abs(M.eer(s, y) - eer_sweep(s, y)))
    eer_ok = eer_dev <= 1e-9
    ssim_dev = 0.0
    for ca, cb in [(0.0, 1.0), (0.2, 0.7), (0.5, 0.5), (0.5, 0.51), (0.9, 0.1)]:
        a = torch.full((11, 11), ca, dtype=torch.float64)
        b = torch.full((11, 11), cb, dtype=torch.float64)
        ssim_dev = max(ssim_dev, abs(float(M.ssim(a, b)) - ssim_single_window(a.numpy(), b.numpy())))
    elapsed = time.time() - t
    record(2, auc_ok and eer_ok and ssim_dev <= 1e-6 and elapsed < 60,
           f"AUC exact={auc_ok}, EER max dev {eer_dev:.1e} (<= 1e-9), SSIM max dev {ssim_dev:.1e} (<= 1e-6), "
           f"{elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------

SWITCH_OWNERS = {
    "use_JL": ("J_L", ("cnn_head", "transformer")),
    "use_JR": ("J_R", ("encoder_head",)),
    "use_JC": ("J_C", ("classifier",)),
    "use_JT": ("J_T", ()),
    "learn_template": (None, ("templates",)),
    "use_cnn": (None, ("cnn_head",)),
    "use_transformer": (None, ()),
}


def test_criterion_3_additivity_and_switches():
    t = time.time()
    images = _load_dataset(tiny())
    problems = []
    trainer = Trainer(tiny())
    for step in range(20):
        rec = trainer.train_step(images[(4 * step) % 16:(4 * step) % 16 + 4])
        total = rec.J_T + rec.J_R + rec.J_C + rec.J_L
        if abs(rec.J - total) > 1e-6 * max(1.0, abs(rec.J)):
            problems.append(f"step {step}: J={rec.J} parts={total}")
    for switch, (term, owners) in SWITCH_OWNERS.items():
        tr = Trainer(tiny(**{switch: False}))
        if switch == "use_transformer" and tr.model.transformer is not None:
            problems.append("transformer built although disabled")
        before = {o: {k: v.clone() for k, v in getattr(tr.model, o).state_dict().items()} for o in owners}
        for step in range(3):
            rec = tr.train_step(images[4 * step:4 * step + 4])
            if term and getattr(rec, term) != 0.0:
                problems.append(f"{switch}: {term}={getattr(rec, term)}")
        for o in owners:
            after = getattr(tr.model, o).state_dict()
            if any(not torch.equal(before[o][k], after[k]) for k in after):
                problems.append(f"{switch}: {o} parameters changed")
    elapsed = time.time() - t
    record(3, not problems and elapsed < 60,
           f"additivity over 20 steps and {len(SWITCH_OWNERS)} switches in {elapsed:.1f}s; "
           f"problems: {problems or 'none'}")


# 4 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_4_toy_end_to_end():
    b = toy_run()
    m = b.metrics
    ok = m["cs"] > 0.80 and m["enc_map_mean"] < 0.10 and m["acc"] > 0.95 and m["auc"] > 0.99
    record(4, ok and b.seconds < 1800,
           f"CS {m['cs']:.4f} (> 0.80), encrypted-map mean {m['enc_map_mean']:.4f} (< 0.10), "
           f"acc {m['acc']:.4f} (> 0.95), AUC {m['auc']:.4f} (> 0.99), {b.seconds / 60:.1f} min")


# 5 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_generalization(validation):
    _, val = validation
    proactive = toy_run()
    t = time.time()
    passive = train_passive_baseline(toy_config(n_templates=0))
    elapsed = proactive.seconds + time.time() - t
    cs_pro = evaluate(proactive.model, val, UNSEEN_GM)["cs"]
    cs_pas = evaluate_passive(passive.model, val, UNSEEN_GM)["cs"]
    record(5, cs_pro >= cs_pas and elapsed < 3600,
           f"unseen GM (ellipse masks, blue recolor): proactive CS {cs_pro:.4f} >= passive CS {cs_pas:.4f}, "
           f"{elapsed / 60:.1f} min")


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_two_branch_ablation():
    t = time.time()
    cs = {"joint": [], "cnn": [], "transformer": []}
    for seed in SEEDS:
        cs["joint"].append(toy_run(seed=seed).metrics["cs"])
        cs["cnn"].append(toy_run(seed=seed, use_transformer=False).metrics["cs"])
        cs["transformer"].append(toy_run(seed=seed, use_cnn=False).metrics["cs"])
    mean = {k: float(np.mean(v)) for k, v in cs.items()}
    elapsed = time.time() - t
    per_seed = ", ".join(f"seed {s}: {cs['joint'][i]:.3f}/{cs['cnn'][i]:.3f}/{cs['transformer'][i]:.3f}"
                         for i, s in enumerate(SEEDS))
    record(6, mean["joint"] >= max(mean["cnn"], mean["transformer"]) - 0.02,
           f"mean CS joint {mean['joint']:.4f} >= max(cnn {mean['cnn']:.4f}, transformer "
           f"{mean['transformer']:.4f}) - 0.02 [joint/cnn/transformer {per_seed}], {elapsed / 60:.1f} min")


# 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_degradations(validation):
    _, val = validation
    b = toy_run()
    t = time.time()
    rows = degrade_eval(b.model, val, b.config.manipulator)
    clean = rows[0]["cs"]
    drops = {r["degradation"]: clean - r["cs"] for r in rows[1:]}
    elapsed = time.time() - t
    ok = set(drops) == set(DEGRADATION_KINDS) and max(drops.values()) < 0.30 and elapsed < 600
    record(7, ok, f"clean CS {clean:.4f}; drops " + ", ".join(f"{k} {v:+.4f}" for k, v in drops.items())
           + f" (all < 0.30), {elapsed:.1f}s")


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_gm_finetuning(validation):
    train_imgs, val = validation
    b = toy_run()
    model = copy.deepcopy(b.model)
    t = time.time()
    gm0 = SyntheticManipulator("tiny_autoencoder", name="ft", seed=5)
    before_params = {k: v.clone() for k, v in gm0.state_dict().items()}
    finetune_gm(gm0, model, train_imgs, "freeze_malp", steps=0, config=b.config)
    unchanged = all(torch.equal(before_params[k], v) for k, v in gm0.state_dict().items())

    gm = SyntheticManipulator("tiny_autoencoder", name="ft", seed=5)
    before = detectability(model, gm, val)
    gm, _ = finetune_gm(gm, model, train_imgs, "freeze_malp", steps=500, config=b.config)
    after = detectability(model, gm, val)
    drop = (before - after) / before
    elapsed = time.time() - t
    record(8, drop >= 0.20 and unchanged and elapsed < 600,
           f"fake-map norm {before:.3f} -> {after:.3f} ({drop * 100:.1f}% drop, >= 20%); "
           f"0-step GM unchanged={unchanged}, {elapsed:.1f}s")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_determinism_and_round_trips(tmp_path):
    cfg = dict(iterations=60)
    a, b = train(toy_config(**cfg)), train(toy_config(**cfg))
    same_seed = abs(a.metrics["cs"] - b.metrics["cs"])

    tset = init_template_set(3, 64, seed=7)
    save_templates(tset, tmp_path / "t.bin")
    template_exact = torch.equal(load_templates(tmp_path / "t.bin"), tset.templates.detach())

    save_bundle(a, tmp_path / "ckpt")
    loaded = load_bundle(tmp_path / "ckpt")
    cfg_full = toy_config(**cfg)
    val = split_dataset(_load_dataset(cfg_full), cfg_full.val_size)[1]
    again = evaluate(loaded.model, val, loaded.config.manipulator)
    drift = max(abs(again[k] - a.metrics[k]) for k in ("cs", "psnr", "ssim", "acc", "auc", "eer", "ap"))
    record(9, same_seed <= 1e-5 and template_exact and drift <= 1e-6,
           f"same-seed CS diff {same_seed:.1e} (<= 1e-5), template file bit-exact={template_exact}, "
           f"checkpoint metric drift {drift:.1e} (<= 1e-6)")
