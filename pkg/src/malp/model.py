"""Network containers: the proactive framework and the passive baseline."""
import torch
import torch.nn as nn

from .encryption import DEFAULT_STRENGTH, init_template_set
from .image import resize_bilinear
from .localization import (ArchConfig, ConvHead, MapClassifier, SharedTrunk, TransformerBranch,
                           conv_block, _check_rgb)


class MaLP(nn.Module):
    """Template set, shared trunk, CNN/transformer map branches, recovery encoder and map classifier."""

    def __init__(self, resolution=128, arch=None, n_templates=1, m=DEFAULT_STRENGTH, seed=0,
                 use_transformer=True, classifier_source="cnn"):
        super().__init__()
        arch = arch or ArchConfig()
        if classifier_source not in ("cnn", "transformer"):
            raise ValueError("classifier_source must be 'cnn' or 'transformer'")
        self.resolution = resolution
        self.arch = arch
        self.classifier_source = classifier_source
        self.trained = False
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.templates = init_template_set(n_templates, resolution, seed, m)
            self.trunk = SharedTrunk(arch)
            self.cnn_head = ConvHead(self.trunk.out_channels, arch, sigmoid=True)
            self.encoder_head = ConvHead(self.trunk.out_channels, arch, sigmoid=False)
            self.transformer = TransformerBranch(resolution, arch) if use_transformer else None
            self.classifier = MapClassifier(arch)

    def forward(self, images, use_cnn=True, use_transformer=True):
        """Training-time pass. Returns maps from each active branch, the recovered template and the logit."""
        feats = self.trunk(images)
        out = {"recovered": self.encoder_head(feats).squeeze(1)}
        if use_cnn:
            out["cnn_map"] = self.cnn_head(feats)
        if use_transformer and self.transformer is not None:
            out["transformer_map"] = self.transformer(images)
        source = "cnn_map" if self.classifier_source == "cnn" else "transformer_map"
        out["logit"] = self.classify(out[source])
        return out

    def classify(self, fmap):
        if fmap.shape[-1] != self.resolution or fmap.shape[-2] != self.resolution:
            fmap = resize_bilinear(fmap, self.resolution, self.resolution)
        return self.classifier(fmap)

    def cnn_map(self, images):
        return self.cnn_head(self.trunk(images))

    def recover(self, images):
        return self.encoder_head(self.trunk(images)).squeeze(1)

    def transformer_map(self, images):
        if self.transformer is None:
            raise RuntimeError("this model was built without the transformer branch")
        if images.shape[-1] != self.resolution:
            images = resize_bilinear(images, self.resolution, self.resolution)
        return self.transformer(images)

    def infer(self, images, branch="cnn"):
        """Inference pass at any resolution; the CNN branch is fully convolutional."""
        if branch == "cnn":
            feats = self.trunk(images)
            fmap = self.cnn_head(feats)
            recovered = self.encoder_head(feats).squeeze(1)
        else:
            fmap = self.transformer_map(images)
            if fmap.shape[-2:] != images.shape[-2:]:
                fmap = resize_bilinear(fmap, *images.shape[-2:])
            recovered = self.recover(images)
        return {"map": fmap, "recovered": recovered, "logit": self.classify(fmap)}


class PassiveLocalizer(nn.Module):
    """Trunk plus a deeper regression head mapping an image straight to a fakeness map."""

    def __init__(self, resolution=128, arch=None, seed=0, depth=6):
        super().__init__()
        arch = arch or ArchConfig()
        self.resolution = resolution
        self.arch = arch
        self.trained = False
        w = arch.head_widths[0]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.trunk = SharedTrunk(arch)
            layers = [conv_block(self.trunk.out_channels, w)] + [conv_block(w, w) for _ in range(depth - 1)]
            self.head = nn.Sequential(*layers, nn.Conv2d(w, 1, 1))

    def forward(self, images):
        _check_rgb(images)
        return torch.sigmoid(self.head(self.trunk(images)))
