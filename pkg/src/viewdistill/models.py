"""Model assembly: per-view teacher networks, the distillation student with
its feature-map and representation factorization branches, checkpoint I/O,
and image-to-tensor conversion."""
from __future__ import annotations

from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbones import build_backbone, contract_shape
from .blocks import (EmbeddingBlock, FeatSelFMFB, FeatSelRFB, MappingBlock,
                     stabilized_gmp)
from .config import FDConfig
from .views import HOLISTIC


class ConfigHashMismatch(RuntimeError):
    """A checkpoint was produced under a different configuration."""


def image_batch_to_tensor(images: Sequence[np.ndarray], mean, std,
                          dtype=torch.float32) -> torch.Tensor:
    """Stack HxWx3 uint8 images into a normalized (N, 3, H, W) tensor."""
    batch = np.stack([np.asarray(im, dtype=np.float32) / 255.0 for im in images])
    t = torch.from_numpy(batch).permute(0, 3, 1, 2).to(dtype)
    mean_t = torch.tensor(mean, dtype=dtype).view(1, 3, 1, 1)
    std_t = torch.tensor(std, dtype=dtype).view(1, 3, 1, 1)
    return (t - mean_t) / std_t


class ViewModel(nn.Module):
    """Single-view training system: backbone -> stabilized GMP -> embedding,
    with a bias-free classifier on top for the identity loss."""

    def __init__(self, backbone: str, width: int, embedding_dim: int,
                 n_classes: int, pool_kernel: int, pretrained: bool = False):
        super().__init__()
        self.backbone = build_backbone(backbone, width=width,
                                       pretrained=pretrained)
        self.pool_kernel = pool_kernel
        self.embedding = EmbeddingBlock(self.backbone.out_channels, embedding_dim)
        self.classifier = nn.Linear(embedding_dim, n_classes, bias=False)
        self.embedding_dim = embedding_dim

    def forward(self, x):
        f = self.backbone(x)
        p = stabilized_gmp(f, self.pool_kernel)
        r = self.embedding(p)
        z = self.classifier(r)
        return f, p, r, z

    def embed(self, x):
        """Retrieval representation only (the BN output, no rectification)."""
        f = self.backbone(x)
        return self.embedding(stabilized_gmp(f, self.pool_kernel))


class StudentOutputs(NamedTuple):
    fmap: torch.Tensor
    pooled: torch.Tensor
    embedding: torch.Tensor
    logits: torch.Tensor
    attr: Dict[str, torch.Tensor]    # feature-map branch outputs per view
    metric: Dict[str, torch.Tensor]  # representation branch outputs per view


class FDStudent(nn.Module):
    """Holistic student with one feature-map branch and one representation
    branch per supervising view.

    Feature-map branch k: 1x1-conv FeatSel -> stabilized GMP -> embedding,
    mimicking teacher k's representation from the student's feature maps.
    Representation branch k: FC FeatSel -> mapping into teacher k's space
    (the holistic branch maps the student embedding directly, no FeatSel).
    """

    def __init__(self, config: FDConfig, n_classes: int):
        super().__init__()
        self.config_hash = config.config_hash()
        self.pool_kernel = config.pool_kernel
        self.branch_pool_kernel = config.branch_pool_kernel
        sc = config.student
        self.backbone = build_backbone(sc.backbone, width=sc.width,
                                       pretrained=sc.pretrained)
        c = self.backbone.out_channels
        self.embedding = EmbeddingBlock(c, sc.embedding_dim)
        self.classifier = nn.Linear(sc.embedding_dim, n_classes, bias=False)
        self.embedding_dim = sc.embedding_dim

        self.view_names = tuple(v.name for v in config.active_views())
        self.fmfb_featsel = nn.ModuleDict()
        self.fmfb_embed = nn.ModuleDict()
        self.rfb_featsel = nn.ModuleDict()
        self.rfb_map = nn.ModuleDict()
        for name in self.view_names:
            dim = config.teacher_dim(name)
            self.fmfb_featsel[name] = FeatSelFMFB(c, config.featsel_channels)
            self.fmfb_embed[name] = EmbeddingBlock(config.featsel_channels, dim)
            if name == HOLISTIC:
                self.rfb_map[name] = MappingBlock(sc.embedding_dim, dim)
            else:
                self.rfb_featsel[name] = FeatSelRFB(sc.embedding_dim,
                                                    config.featsel_channels)
                self.rfb_map[name] = MappingBlock(config.featsel_channels, dim)

    def forward(self, x, run_attr: bool = True,
                run_metric: bool = True) -> StudentOutputs:
        f = self.backbone(x)
        p = stabilized_gmp(f, self.pool_kernel)
        r = self.embedding(p)
        z = self.classifier(r)
        attr: Dict[str, torch.Tensor] = {}
        metric: Dict[str, torch.Tensor] = {}
        if run_attr:
            for name in self.view_names:
                fk = self.fmfb_featsel[name](f)
                attr[name] = self.fmfb_embed[name](
                    stabilized_gmp(fk, self.branch_pool_kernel))
        if run_metric:
            for name in self.view_names:
                if name == HOLISTIC:
                    metric[name] = self.rfb_map[name](r)
                else:
                    metric[name] = self.rfb_map[name](self.rfb_featsel[name](r))
        return StudentOutputs(f, p, r, z, attr, metric)

    def embed(self, x):
        f = self.backbone(x)
        return self.embedding(stabilized_gmp(f, self.pool_kernel))

    def load_holistic_init(self, view_model_state: dict) -> None:
        """Copy feature-extraction and classifier weights from a pre-trained
        holistic view model; branch parameters keep their fresh init."""
        own = self.state_dict()
        missing = [k for k in view_model_state if k not in own]
        if missing:
            raise KeyError(f"init checkpoint has unexpected keys: {missing[:5]}")
        own.update(view_model_state)
        self.load_state_dict(own)


def student_output_shapes(config: FDConfig, batch: int = 1) -> dict:
    """Shapes of every student output, derived from the config alone."""
    hol = config.holistic_view
    fh, fw = contract_shape(hol.out_height, hol.out_width)
    channels = {"ref": 4 * config.student.width, "squeezenet": 512,
                "resnet18": 512, "resnet34": 512, "resnet50": 2048,
                "resnet101": 2048, "resnet152": 2048}[config.student.backbone]
    shapes = {
        "fmap": (batch, channels, fh, fw),
        "pooled": (batch, channels),
        "embedding": (batch, config.student.embedding_dim),
    }
    for v in config.active_views():
        dim = config.teacher_dim(v.name)
        shapes[f"attr/{v.name}"] = (batch, dim)
        shapes[f"metric/{v.name}"] = (batch, dim)
    return shapes


def make_embed_fn(model: nn.Module, mean, std):
    """Wrap a model's retrieval head as image -> float32 vector (eval mode)."""

    def embed(image: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                x = image_batch_to_tensor([image], mean, std)
                r = model.embed(x)
            return r[0].cpu().numpy().astype(np.float32)
        finally:
            if was_training:
                model.train()

    return embed


def save_checkpoint(path, model: nn.Module, config: FDConfig, *,
                    role: str, epoch: int, metrics: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Write a checkpoint: manifest (config hash, view registry, dims) plus
    the named parameter blobs."""
    from .views import serialize_views

    manifest = {
        "role": role,
        "epoch": epoch,
        "config_hash": config.config_hash(),
        "views": serialize_views(config.views),
        "dims": {
            "student_embedding": config.student.embedding_dim,
            "teacher_holistic": config.teacher.holistic_dim,
            "teacher_partial": config.teacher.partial_dim,
        },
        "metrics": metrics or {},
    }
    if extra:
        manifest.update(extra)
    torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)


def load_checkpoint(path, expected_config_hash: Optional[str] = None):
    """Load (state_dict, manifest); refuse a config-hash mismatch loudly."""
    blob = torch.load(path, map_location="cpu", weights_only=True)
    manifest = blob["manifest"]
    if (expected_config_hash is not None
            and manifest["config_hash"] != expected_config_hash):
        raise ConfigHashMismatch(
            f"checkpoint {path} was written under config "
            f"{manifest['config_hash'][:12]}..., expected "
            f"{expected_config_hash[:12]}...")
    return blob["state_dict"], manifest
