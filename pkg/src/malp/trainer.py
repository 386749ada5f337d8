"""End-to-end optimisation of the proactive framework, the passive baseline, and
GM fine-tuning with the framework as discriminator."""
import copy
import csv
import logging
import math
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import torch
import yaml

from . import metrics as M
from .detection import fused_bce, fused_score, recovered_similarity, recovery_loss
from .encryption import encrypt, load_templates, save_templates, select_random_index, template_constraint_loss
from .errors import ConfigError, TrainingDiverged
from .localization import ArchConfig, localization_loss
from .manipulators import Manipulator, SyntheticManipulator, gt_fakeness_map, load_external_gm
from .model import MaLP, PassiveLocalizer

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (100.0, 5.0, 4.0, 25.0, 25.0, 25.0, 50.0, 15.0, 20.0, 50.0)
CHECKPOINT_FORMAT = "malp-checkpoint"
CHECKPOINT_VERSION = 1
SWITCHES = ("use_cnn", "use_transformer", "learn_template", "use_JC", "use_JT", "use_JL", "use_JR")


@dataclass
class TrainConfig:
    iterations: int = 150_000
    batch_size: int = 4
    learning_rate: float = 1e-5
    # "constant" or "cosine" (decay to zero over ``iterations``)
    lr_schedule: str = "constant"
    optimizer: str = "adam"
    transformer_optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.5e-5
    eps: float = 1e-8
    lambdas: tuple = DEFAULT_LAMBDAS
    n_templates: int = 1
    m: float = 0.30
    seed: int = 0
    resolution: int = 128
    arch: ArchConfig = field(default_factory=ArchConfig)
    manipulator: dict = field(default_factory=lambda: {"type": "synthetic", "params": {"mode": "region_recolor"}})
    dataset: dict = field(default_factory=lambda: {"kind": "toy", "n": 512, "seed": 0})
    val_size: int = 64
    use_cnn: bool = True
    use_transformer: bool = True
    learn_template: bool = True
    use_JC: bool = True
    use_JT: bool = True
    use_JL: bool = True
    use_JR: bool = True
    # ground truth against the original image ("original") or the encrypted one ("encrypted")
    gt_reference: str = "original"
    gm_gradients: bool = True
    classifier_source: str = "cnn"
    lowpass_radius: int = None
    ssim_window: int = 11
    passive_depth: int = 6
    log_every: int = 100
    eval_seed: int = 12345

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        self.lambdas = tuple(float(v) for v in self.lambdas)

    def validate(self, passive=False):
        if len(self.lambdas) != 10:
            raise ConfigError("lambdas must list exactly 10 weights")
        if any(v < 0 for v in self.lambdas):
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if passive:
            if self.n_templates != 0:
                raise ConfigError("the passive baseline uses no templates; set n_templates to 0")
        elif self.n_templates < 1:
            raise ConfigError("n_templates must be >= 1")
        if not 0 < self.m <= 1:
            raise ConfigError("template strength m must lie in (0, 1]")
        if not (self.use_cnn or self.use_transformer):
            raise ConfigError("at least one localization branch must be enabled")
        if self.gt_reference not in ("original", "encrypted"):
            raise ConfigError("gt_reference must be 'original' or 'encrypted'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for opt in (self.optimizer, self.transformer_optimizer):
            if opt not in ("adam", "adamw"):
                raise ConfigError(f"unknown optimizer {opt!r}")
        if self.use_transformer and self.resolution % self.arch.patch_size:
            raise ConfigError("patch size must divide the resolution")
        return self

    @property
    def effective_classifier_source(self):
        return "transformer" if not self.use_cnn else self.classifier_source

    @property
    def eval_branch(self):
        return "cnn" if self.use_cnn else "transformer"

    def to_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["arch"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["arch"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path):
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)


def toy_config(**overrides):
    """Pinned desk-scale configuration used by the acceptance suite."""
    cfg = TrainConfig(
        iterations=2000,
        batch_size=4,
        learning_rate=3e-3,
        resolution=64,
        seed=0,
        arch=ArchConfig(trunk_widths=(8, 8, 16, 16, 16), head_widths=(16, 16, 8, 8), patch_size=8,
                        embed_dim=48, num_heads=2,
                        classifier_widths=(8, 8, 8, 16, 16, 16, 16, 16, 16), classifier_fc=(32, 16)),
        manipulator={"type": "synthetic",
                     "params": {"mode": "region_recolor", "mask_kind": "rect", "strength": 0.6,
                                "color": [0.9, 0.2, 0.2], "seed": 0}},
        dataset={"kind": "toy", "n": 576, "seed": 0},
        val_size=64,
    )
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg


def build_manipulator(spec, name="train_gm") -> Manipulator:
    if isinstance(spec, Manipulator):
        return spec.freeze() if not spec.frozen else spec
    return load_external_gm({"gm_name": spec.get("name", name), "adapter": spec})


@dataclass
class LossBreakdown:
    J_T: float
    J_R: float
    J_C: float
    J_L: float
    J: float

    def as_dict(self):
        return asdict(self)


def build_model(config: TrainConfig) -> MaLP:
    return MaLP(config.resolution, config.arch, config.n_templates, config.m, config.seed,
                use_transformer=config.use_transformer,
                classifier_source=config.effective_classifier_source)


def _optimizer(kind, params, config, lr):
    cls = torch.optim.AdamW if kind == "adamw" else torch.optim.Adam
    wd = config.weight_decay if kind == "adamw" else 0.0
    return cls(params, lr=lr, betas=(config.beta1, config.beta2), eps=config.eps, weight_decay=wd)


class BatchSampler:
    """Epoch-wise shuffled batches drawn from a seeded generator."""

    def __init__(self, n, batch_size, gen):
        self.n, self.batch_size, self.gen = n, batch_size, gen
        self._order, self._pos = torch.randperm(n, generator=gen), 0

    def next(self):
        if self._pos + self.batch_size > self.n:
            self._order, self._pos = torch.randperm(self.n, generator=self.gen), 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


class Trainer:
    """Owns the parameters, optimizers and RNG state of one training run."""

    def __init__(self, config: TrainConfig, model=None, manipulator=None):
        self.config = config.validate()
        self.model = model if model is not None else build_model(config)
        self.gm = build_manipulator(manipulator if manipulator is not None else config.manipulator)
        if isinstance(self.gm, SyntheticManipulator):
            self.gm.reseed(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.step_count = 0
        self.history = []
        self.last_checkpoint = None
        self.trainable = self._trainable_groups()
        self._set_requires_grad()
        self.optimizers = self._make_optimizers()
        self.schedulers = []
        if config.lr_schedule == "cosine" and config.iterations > 0:
            self.schedulers = [torch.optim.lr_scheduler.CosineAnnealingLR(o, T_max=config.iterations)
                               for o in self.optimizers]

    def _groups(self):
        g = {"templates": self.model.templates, "trunk": self.model.trunk, "cnn_head": self.model.cnn_head,
             "encoder_head": self.model.encoder_head, "classifier": self.model.classifier}
        if self.model.transformer is not None:
            g["transformer"] = self.model.transformer
        return g

    def _trainable_groups(self):
        c = self.config
        cnn_feeds_classifier = c.use_cnn and c.effective_classifier_source == "cnn"
        trainable = {
            "templates": c.learn_template,
            "cnn_head": c.use_cnn and c.use_JL,
            "transformer": c.use_transformer and c.use_JL,
            "encoder_head": c.use_JR,
            "classifier": c.use_JC,
        }
        trainable["trunk"] = (trainable["cnn_head"] or c.use_JR
                              or (c.use_JC and (cnn_feeds_classifier or c.use_JR)))
        return {k: v for k, v in trainable.items() if k in self._groups()}

    def _set_requires_grad(self):
        for name, mod in self._groups().items():
            for p in mod.parameters():
                p.requires_grad_(self.trainable[name])

    def _make_optimizers(self):
        c = self.config
        main, trans = [], []
        for name, mod in self._groups().items():
            if self.trainable[name]:
                (trans if name == "transformer" else main).extend(mod.parameters())
        opts = []
        if main:
            opts.append(_optimizer(c.optimizer, main, c, c.learning_rate))
        if trans:
            opts.append(_optimizer(c.transformer_optimizer, trans, c, c.learning_rate))
        return opts

    def _train_mode(self):
        self.model.train()
        # frozen modules keep their batch-norm statistics untouched
        for name, mod in self._groups().items():
            if not self.trainable[name]:
                mod.eval()

    def compute_losses(self, batch):
        """Forward pass over one batch of real images; returns the four loss tensors."""
        c = self.config
        lam = c.lambdas
        model = self.model
        tset = model.templates
        b = batch.shape[0]
        idx = select_random_index(tset, self.gen, size=b)
        enc = encrypt(batch, tset, idx)
        fake = self.gm(enc if c.gm_gradients else enc.detach())
        reference = batch if c.gt_reference == "original" else enc
        gt = gt_fakeness_map(reference.detach(), fake.detach())

        x = torch.cat([enc, fake])
        is_enc = torch.cat([torch.ones(b, dtype=torch.bool), torch.zeros(b, dtype=torch.bool)])
        labels = is_enc.float()
        idx2 = torch.cat([idx, idx])
        gt2 = torch.cat([gt, gt])

        out = model(x, use_cnn=c.use_cnn, use_transformer=c.use_transformer)
        zero = x.new_zeros(())

        j_t = template_constraint_loss(tset, *lam[0:3], lowpass_radius=c.lowpass_radius) if c.use_JT else zero
        j_l = zero
        if c.use_JL:
            for key in ("cnn_map", "transformer_map"):
                if key in out:
                    j_l = j_l + localization_loss(out[key], gt2, is_enc, *lam[3:7], ssim_window=c.ssim_window)
        j_r = recovery_loss(out["recovered"], tset.templates, idx2, is_enc, lam[7], lam[8]) if c.use_JR else zero
        if c.use_JC:
            cs = recovered_similarity(out["recovered"], tset.templates, idx2)
            j_c = fused_bce(fused_score(out["logit"], cs), labels, lam[9])
        else:
            j_c = zero
        return {"J_T": j_t, "J_R": j_r, "J_C": j_c, "J_L": j_l}

    def train_step(self, batch) -> LossBreakdown:
        if not self.gm.frozen:
            raise RuntimeError("the manipulator must stay frozen during training")
        self._train_mode()
        parts = self.compute_losses(batch)
        total = parts["J_T"] + parts["J_R"] + parts["J_C"] + parts["J_L"]
        if not torch.isfinite(total):
            raise TrainingDiverged(self.step_count, self.last_checkpoint)
        for opt in self.optimizers:
            opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            for opt in self.optimizers:
                opt.step()
        for sched in self.schedulers:
            sched.step()
        self.step_count += 1
        rec = LossBreakdown(**{k: float(v.detach()) for k, v in parts.items()}, J=float(total.detach()))
        self.history.append(rec)
        return rec

    def fit(self, images, iterations=None, callback=None):
        iterations = self.config.iterations if iterations is None else iterations
        if images.shape[0] < self.config.batch_size:
            raise ConfigError(f"dataset has {images.shape[0]} images, fewer than batch size {self.config.batch_size}")
        sampler = BatchSampler(images.shape[0], self.config.batch_size, self.gen)
        # dropout draws from the global generator; seed it without leaking state to the caller
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.config.seed + self.step_count)
            for _ in range(iterations):
                rec = self.train_step(images[sampler.next()])
                if self.config.log_every and self.step_count % self.config.log_every == 0:
                    log.info("step %d  J=%.4f  J_T=%.4f J_R=%.4f J_C=%.4f J_L=%.4f", self.step_count,
                             rec.J, rec.J_T, rec.J_R, rec.J_C, rec.J_L)
                if callback is not None:
                    callback(self, rec)
        self.model.trained = True
        return self.history


def split_dataset(images, val_size):
    if images.shape[0] == 0:
        raise ConfigError("dataset is empty")
    if val_size >= images.shape[0]:
        raise ConfigError(f"val_size {val_size} leaves no training images")
    return images[:-val_size] if val_size else images, images[-val_size:] if val_size else images[:0]


def _eval_gm(gm, seed):
    gm = copy.deepcopy(gm)
    if isinstance(gm, SyntheticManipulator):
        gm.reseed(seed)
    return gm


@torch.no_grad()
def evaluate(model: MaLP, images, manipulator, seed=12345, degradation=None, branch="cnn",
             gt_reference="original", chunk=16, ids=None):
    """Held-out localization and detection metrics.

    Each image contributes an encrypted and a manipulated sample. ``degradation``
    (a callable on batches) is applied to both before the networks see them;
    the ground truth is computed from the clean images.
    """
    model.eval()
    gm = _eval_gm(build_manipulator(manipulator), seed)
    gen = torch.Generator().manual_seed(seed)
    tset = model.templates
    cs, ps, ss, enc_means, fake_norms = [], [], [], [], []
    scores, labels = [], []
    n = images.shape[0]
    for start in range(0, n, chunk):
        x = images[start:start + chunk]
        b = x.shape[0]
        idx = select_random_index(tset, gen, size=b)
        enc = encrypt(x, tset, idx)
        fake = gm(enc, ids=None if ids is None else ids[start:start + b])
        gt = gt_fakeness_map(x if gt_reference == "original" else enc, fake)
        if degradation is not None:
            enc, fake = degradation(enc), degradation(fake)
        out = model.infer(torch.cat([enc, fake]), branch=branch)
        fmap, logit, rec = out["map"], out["logit"], out["recovered"]
        pe, pf = fmap[:b], fmap[b:]
        cs.extend(M.cosine_similarity(pf, gt).tolist())
        ss.extend(M.ssim(pf, gt).tolist() if min(gt.shape[-2:]) >= M.SSIM_WINDOW else [math.nan] * b)
        ps.extend(M.psnr(pf[i], gt[i]) for i in range(b))
        enc_means.extend(pe.flatten(1).mean(1).tolist())
        fake_norms.extend(pf.flatten(1).norm(dim=1).tolist())
        cs_rec = recovered_similarity(rec, tset.templates)
        scores.extend(fused_score(logit, cs_rec).tolist())
        labels.extend([1] * b + [0] * b)
    return _summarise(cs, ps, ss, enc_means, fake_norms, scores, labels)


def _mean(v):
    return float(sum(v) / len(v)) if v else math.nan


def _summarise(cs, ps, ss, enc_means, fake_norms, scores, labels):
    res = {"n_images": len(cs), "cs": _mean(cs), "psnr": _mean(ps), "ssim": _mean(ss),
           "enc_map_mean": _mean(enc_means), "fake_map_norm": _mean(fake_norms)}
    if scores and len(set(labels)) == 2:
        res["acc"] = M.accuracy(scores, labels)
        res["auc"] = M.auc(scores, labels)
        res["eer"] = M.eer(scores, labels)
        # AP is reported over the fake class
        res["ap"] = M.average_precision([1 - s for s in scores], [1 - y for y in labels])
    return res


@dataclass
class CheckpointBundle:
    model: torch.nn.Module
    config: TrainConfig
    metrics: dict
    history: list
    path: Path = None
    kind: str = "malp"


def train(config: TrainConfig, dataset=None, out_dir=None, callback=None) -> CheckpointBundle:
    """Full run: split the data, optimise, evaluate on the held-out split, optionally save."""
    config.validate()
    images = dataset if dataset is not None else _load_dataset(config)
    train_imgs, val_imgs = split_dataset(images, config.val_size)
    trainer = Trainer(config)
    trainer.fit(train_imgs, callback=callback)
    metrics = evaluate(trainer.model, val_imgs, trainer.gm, seed=config.eval_seed,
                       branch=config.eval_branch, gt_reference=config.gt_reference) if len(val_imgs) else {}
    bundle = CheckpointBundle(trainer.model, config, metrics, trainer.history)
    if out_dir is not None:
        save_bundle(bundle, out_dir)
    return bundle


def _load_dataset(config):
    from .data import load_dataset
    return load_dataset(config.dataset, config.resolution)


def passive_loss(pred, gt, is_real, lam):
    return localization_loss(pred, gt, is_real, *lam[3:7])


def train_passive_baseline(config: TrainConfig, dataset=None, out_dir=None) -> CheckpointBundle:
    """Passive localizer trained on plain real / manipulated pairs, with no templates involved.

    The ground truth compares the real image with its manipulation. Real images
    get the zero-map objective and manipulated ones the CS + SSIM objective.
    """
    config.validate(passive=True)
    images = dataset if dataset is not None else _load_dataset(config)
    train_imgs, val_imgs = split_dataset(images, config.val_size)
    if train_imgs.shape[0] < config.batch_size:
        raise ConfigError(f"dataset has {train_imgs.shape[0]} images, fewer than batch size {config.batch_size}")
    model = PassiveLocalizer(config.resolution, config.arch, config.seed, config.passive_depth)
    gm = build_manipulator(config.manipulator)
    if isinstance(gm, SyntheticManipulator):
        gm.reseed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = _optimizer(config.optimizer, model.parameters(), config, config.learning_rate)
    sampler = BatchSampler(train_imgs.shape[0], config.batch_size, gen)
    history = []
    model.train()
    for step in range(config.iterations):
        x = train_imgs[sampler.next()]
        with torch.no_grad():
            fake = gm(x)
        gt = gt_fakeness_map(x, fake)
        b = x.shape[0]
        is_real = torch.cat([torch.ones(b, dtype=torch.bool), torch.zeros(b, dtype=torch.bool)])
        loss = passive_loss(model(torch.cat([x, fake])), torch.cat([gt, gt]), is_real, config.lambdas)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    model.trained = True
    metrics = evaluate_passive(model, val_imgs, gm, seed=config.eval_seed) if len(val_imgs) else {}
    bundle = CheckpointBundle(model, config, metrics, history, kind="passive")
    if out_dir is not None:
        save_bundle(bundle, out_dir)
    return bundle


@torch.no_grad()
def evaluate_passive(model: PassiveLocalizer, images, manipulator, seed=12345, degradation=None, chunk=16):
    model.eval()
    gm = _eval_gm(build_manipulator(manipulator), seed)
    cs, ps, ss, real_means, fake_norms = [], [], [], [], []
    for start in range(0, images.shape[0], chunk):
        x = images[start:start + chunk]
        b = x.shape[0]
        fake = gm(x)
        gt = gt_fakeness_map(x, fake)
        if degradation is not None:
            x, fake = degradation(x), degradation(fake)
        pred = model(torch.cat([x, fake]))
        pr, pf = pred[:b], pred[b:]
        cs.extend(M.cosine_similarity(pf, gt).tolist())
        ss.extend(M.ssim(pf, gt).tolist())
        ps.extend(M.psnr(pf[i], gt[i]) for i in range(b))
        real_means.extend(pr.flatten(1).mean(1).tolist())
        fake_norms.extend(pf.flatten(1).norm(dim=1).tolist())
    return _summarise(cs, ps, ss, real_means, fake_norms, [], [])


@torch.no_grad()
def detectability(model: MaLP, gm, images, seed=12345, chunk=16):
    """Mean L2 norm of the predicted map on manipulated images: lower means harder to localize."""
    model.eval()
    gm = _eval_gm(gm, seed)
    gen = torch.Generator().manual_seed(seed)
    norms = []
    for start in range(0, images.shape[0], chunk):
        x = images[start:start + chunk]
        enc = encrypt(x, model.templates, select_random_index(model.templates, gen, size=x.shape[0]))
        norms.extend(model.infer(gm(enc))["map"].flatten(1).norm(dim=1).tolist())
    return _mean(norms)


def finetune_gm(gm: SyntheticManipulator, model: MaLP, images, mode="freeze_malp", steps=500,
                gm_lr=1e-3, malp_lr=1e-4, config: TrainConfig = None, seed=0):
    """Fine-tune a differentiable GM against the framework used as a discriminator.

    The GM is pushed to make its outputs look encrypted (fused score towards the
    real class) and their predicted fakeness maps towards zero. In ``joint`` mode
    the framework keeps training on its own objective at the lower ``malp_lr``.
    Returns the GM (frozen again) and a per-step history.
    """
    if mode not in ("freeze_malp", "joint"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if not getattr(gm, "differentiable", False) or not any(True for _ in gm.parameters()):
        raise ValueError(f"GM {getattr(gm, 'name', gm)!r} has no trainable parameters to fine-tune")
    if mode == "joint" and not malp_lr < gm_lr:
        raise ValueError("joint fine-tuning needs malp_lr < gm_lr")
    config = config or toy_config(resolution=model.resolution)
    lam = config.lambdas
    gm.unfreeze()
    gm_opt = torch.optim.Adam(gm.parameters(), lr=gm_lr)
    gen = torch.Generator().manual_seed(seed)
    sampler = BatchSampler(images.shape[0], config.batch_size, gen)

    trainer = None
    if mode == "joint":
        joint_cfg = copy.deepcopy(config)
        joint_cfg.learning_rate = malp_lr
        trainer = Trainer(joint_cfg, model=model, manipulator=IdentityRelay(gm))
    else:
        for p in model.parameters():
            p.requires_grad_(False)

    history = []
    for _ in range(steps):
        x = images[sampler.next()]
        model.eval()
        tset = model.templates
        idx = select_random_index(tset, gen, size=x.shape[0])
        enc = encrypt(x, tset, idx).detach()
        fake = gm(enc)
        out = model.infer(fake)
        cs = recovered_similarity(out["recovered"], tset.templates.detach(), idx)
        score = fused_score(out["logit"], cs)
        fool = fused_bce(score, torch.ones_like(score), lam[9])
        zero_map = lam[3] * out["map"].pow(2).flatten(1).sum(1).mean()
        loss = fool + zero_map
        gm_opt.zero_grad(set_to_none=True)
        loss.backward()
        gm_opt.step()
        rec = {"gm_loss": float(loss.detach()), "map_norm": float(out["map"].detach().flatten(1).norm(dim=1).mean())}
        if trainer is not None:
            rec["malp_J"] = trainer.train_step(x).J
        history.append(rec)

    if mode == "freeze_malp":
        for p in model.parameters():
            p.requires_grad_(True)
    model.eval()
    gm.freeze()
    return gm, history


class IdentityRelay(Manipulator):
    """Wraps a GM so the framework trains on its outputs without updating it."""

    def __init__(self, gm):
        super().__init__(f"relay:{gm.name}")
        self._gm = [gm]
        self.frozen = True

    def forward(self, images, ids=None):
        with torch.no_grad():
            return self._gm[0](images)


# checkpoint bundles ---------------------------------------------------------

def save_bundle(bundle: CheckpointBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": bundle.kind,
                "trained": bool(getattr(bundle.model, "trained", False)),
                "state_dict": bundle.model.state_dict()}, out / "params.pt")
    bundle.config.save(out / "config.yaml")
    if bundle.metrics:
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(bundle.metrics), lineterminator="\n")
            w.writeheader()
            w.writerow(bundle.metrics)
    if bundle.history and isinstance(bundle.history[0], LossBreakdown):
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "J_T", "J_R", "J_C", "J_L", "J"])
            for i, r in enumerate(bundle.history, 1):
                w.writerow([i, r.J_T, r.J_R, r.J_C, r.J_L, r.J])
    if bundle.kind == "malp":
        save_templates(bundle.model.templates, out / "template.bin")
    bundle.path = out
    return out


def load_bundle(path) -> CheckpointBundle:
    root = Path(path)
    if not (root / "params.pt").exists():
        raise ConfigError(f"{root} is not a checkpoint directory (params.pt missing)")
    blob = torch.load(root / "params.pt", map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{root}/params.pt is not a MaLP checkpoint")
    if blob.get("version", 0) > CHECKPOINT_VERSION:
        raise ConfigError(f"checkpoint version {blob['version']} is newer than supported ({CHECKPOINT_VERSION})")
    config = TrainConfig.load(root / "config.yaml")
    if blob["kind"] == "passive":
        model = PassiveLocalizer(config.resolution, config.arch, config.seed, config.passive_depth)
    else:
        model = build_model(config)
    model.load_state_dict(blob["state_dict"])
    if blob["kind"] == "malp" and (root / "template.bin").exists():
        stored = load_templates(root / "template.bin")
        if not torch.equal(stored, model.templates.templates.detach()):
            raise ConfigError(f"{root}: template.bin disagrees with params.pt")
    model.trained = blob["trained"]
    model.eval()
    metrics = {}
    if (root / "metrics.csv").exists():
        with open(root / "metrics.csv") as fh:
            row = next(csv.DictReader(fh), {})
            metrics = {k: _num(v) for k, v in row.items()}
    return CheckpointBundle(model, config, metrics, [], root, blob["kind"])


def _num(v):
    try:
        f = float(v)
    except ValueError:
        return v
    return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f
