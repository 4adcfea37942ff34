"""Experiment configuration: views, architectures, loss weights, optimizer
and schedule settings, and the augmentation recipe.

Configs serialize to YAML (fractions as 'p/q' strings) and hash to a stable
hex digest; checkpoints and caches carry the hash so stale artifacts are
refused instead of silently reused.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import yaml

from .views import (AugmentParams, ViewSpec, canonical_views, parse_views,
                    serialize_views, scale_views, HOLISTIC)


@dataclass(frozen=True)
class OptimConfig:
    batch_size: int = 32
    lr: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 0.0005
    nesterov: bool = False
    decay_bn_params: bool = False


@dataclass(frozen=True)
class ScheduleConfig:
    """Learning rate halves every ``halve_every`` epochs; training stops at
    ``epochs``."""

    halve_every: int
    epochs: int


@dataclass(frozen=True)
class TeacherConfig:
    backbone: str = "ref"
    width: int = 16
    holistic_dim: int = 512
    partial_dim: int = 256
    pretrained: bool = False


@dataclass(frozen=True)
class StudentConfig:
    backbone: str = "ref"
    width: int = 16
    embedding_dim: int = 512
    pretrained: bool = False


# Student roster: short name -> (backbone, embedding dim).
STUDENT_ROSTER = {
    "S": ("squeezenet", 512),
    "R18a": ("resnet18", 512),
    "R50a": ("resnet50", 512),
    "R50b": ("resnet50", 2048),
    "R101a": ("resnet101", 512),
    "R152a": ("resnet152", 512),
    "R152b": ("resnet152", 2048),
}


@dataclass(frozen=True)
class FDConfig:
    """Full experiment description."""

    views: Tuple[ViewSpec, ...] = field(default_factory=canonical_views)
    teacher: TeacherConfig = TeacherConfig()
    student: StudentConfig = StudentConfig()
    featsel_channels: int = 512
    pool_kernel: int = 4          # student / teacher pooling
    branch_pool_kernel: int = 4   # pooling inside the feature-map branches
    loss_alpha: float = 4.0
    loss_beta: float = 2.0
    optim: OptimConfig = OptimConfig()
    teacher_schedule: ScheduleConfig = ScheduleConfig(halve_every=20, epochs=80)
    student_schedule: ScheduleConfig = ScheduleConfig(halve_every=15, epochs=50)
    augment: AugmentParams = AugmentParams()
    normalize_mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalize_std: Tuple[float, float, float] = (0.229, 0.224, 0.225)
    seed: int = 0
    # Views whose teachers supervise the student; None means all views.
    teacher_subset: Optional[Tuple[str, ...]] = None
    dataset_scheme: str = "market1501"

    def __post_init__(self):
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise ValueError("duplicate view names in registry")
        if HOLISTIC not in names:
            raise ValueError("registry must contain the holistic view")
        if self.teacher_subset is not None:
            unknown = set(self.teacher_subset) - set(names)
            if unknown:
                raise ValueError(f"teacher_subset names unknown views: {unknown}")
            if HOLISTIC not in self.teacher_subset:
                raise ValueError("teacher_subset must include the holistic view")

    # -- derived helpers -------------------------------------------------

    def view(self, name: str) -> ViewSpec:
        for v in self.views:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def holistic_view(self) -> ViewSpec:
        return self.view(HOLISTIC)

    def active_views(self) -> Tuple[ViewSpec, ...]:
        """Views participating in distillation (the teacher subset)."""
        if self.teacher_subset is None:
            return self.views
        order = {v.name: v for v in self.views}
        return tuple(order[n] for n in self.teacher_subset)

    def teacher_dim(self, view_name: str) -> int:
        return (self.teacher.holistic_dim if view_name == HOLISTIC
                else self.teacher.partial_dim)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "views": serialize_views(self.views),
            "teacher": vars(self.teacher).copy(),
            "student": vars(self.student).copy(),
            "featsel_channels": self.featsel_channels,
            "pool_kernel": self.pool_kernel,
            "branch_pool_kernel": self.branch_pool_kernel,
            "loss_alpha": self.loss_alpha,
            "loss_beta": self.loss_beta,
            "optim": vars(self.optim).copy(),
            "teacher_schedule": vars(self.teacher_schedule).copy(),
            "student_schedule": vars(self.student_schedule).copy(),
            "augment": self.augment.to_dict(),
            "normalize_mean": list(self.normalize_mean),
            "normalize_std": list(self.normalize_std),
            "seed": self.seed,
            "teacher_subset": (list(self.teacher_subset)
                               if self.teacher_subset is not None else None),
            "dataset_scheme": self.dataset_scheme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FDConfig":
        return cls(
            views=parse_views(d["views"]),
            teacher=TeacherConfig(**d["teacher"]),
            student=StudentConfig(**d["student"]),
            featsel_channels=d["featsel_channels"],
            pool_kernel=d["pool_kernel"],
            branch_pool_kernel=d["branch_pool_kernel"],
            loss_alpha=d["loss_alpha"],
            loss_beta=d["loss_beta"],
            optim=OptimConfig(**d["optim"]),
            teacher_schedule=ScheduleConfig(**d["teacher_schedule"]),
            student_schedule=ScheduleConfig(**d["student_schedule"]),
            augment=AugmentParams.from_dict(d["augment"]),
            normalize_mean=tuple(d["normalize_mean"]),
            normalize_std=tuple(d["normalize_std"]),
            seed=d["seed"],
            teacher_subset=(tuple(d["teacher_subset"])
                            if d.get("teacher_subset") is not None else None),
            dataset_scheme=d.get("dataset_scheme", "market1501"),
        )

    def to_yaml(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def from_yaml(cls, path) -> "FDConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- presets ---------------------------------------------------------

    def with_student_roster(self, short_name: str) -> "FDConfig":
        backbone, dim = STUDENT_ROSTER[short_name]
        return replace(self, student=StudentConfig(
            backbone=backbone, width=self.student.width, embedding_dim=dim))

    @classmethod
    def canonical(cls) -> "FDConfig":
        return cls()

    @classmethod
    def desk(cls, seed: int = 0, teacher_epochs: int = 12,
             student_epochs: int = 8) -> "FDConfig":
        """CPU-scale preset: tiny reference CNNs and a scaled-down registry
        (same stripe fractions, smaller crop resolutions)."""
        return cls(
            views=scale_views(canonical_views(), holistic_hw=(64, 32),
                              partial_hw=(64, 64)),
            teacher=TeacherConfig(backbone="ref", width=12,
                                  holistic_dim=48, partial_dim=24),
            student=StudentConfig(backbone="ref", width=12, embedding_dim=48),
            featsel_channels=48,
            pool_kernel=2,
            branch_pool_kernel=2,
            optim=OptimConfig(batch_size=16, lr=0.0025),
            teacher_schedule=ScheduleConfig(halve_every=5, epochs=teacher_epochs),
            student_schedule=ScheduleConfig(halve_every=4, epochs=student_epochs),
            seed=seed,
        )
