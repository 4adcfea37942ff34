"""Training orchestration: per-view teacher training, distillation of the
final student against the SR cache, and the resumable three-step pipeline
(teachers + initial student, SR extraction, joint student training).
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import FDConfig
from .datasets import DatasetManifest, SampleRecord, load_image
from .evaluator import evaluate_model, write_report
from .losses import (LossWeights, MaskCounters, cls_loss, regression_loss,
                     total_loss, view_masks)
from .models import (FDStudent, ViewModel, image_batch_to_tensor,
                     load_checkpoint, make_embed_fn, save_checkpoint)
from .srstore import SRCache, build_cache
from .views import (AugmentStage, ViewSpec, augment, crop_view,
                    erase_overlap_fraction)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def lr_at(lr0: float, halve_every: int, epoch: int) -> float:
    """Learning rate at an epoch: lr0 halved once per full period elapsed."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * 0.5 ** (epoch // halve_every)


def make_sgd(model: nn.Module, optim_cfg) -> torch.optim.SGD:
    """SGD with weight decay on conv/FC weights only; batch-norm scale and
    shift parameters are never decayed (unless explicitly enabled)."""
    bn_types = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d)
    bn_params, rest = [], []
    for module in model.modules():
        if isinstance(module, bn_types):
            bn_params.extend(p for p in module.parameters(recurse=False))
    bn_ids = {id(p) for p in bn_params}
    rest = [p for p in model.parameters() if id(p) not in bn_ids]
    bn_decay = optim_cfg.weight_decay if optim_cfg.decay_bn_params else 0.0
    return torch.optim.SGD(
        [{"params": rest, "weight_decay": optim_cfg.weight_decay},
         {"params": bn_params, "weight_decay": bn_decay}],
        lr=optim_cfg.lr, momentum=optim_cfg.momentum,
        nesterov=optim_cfg.nesterov)


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def derive_seed(*parts) -> np.random.SeedSequence:
    """Deterministic child seed from a mix of ints and strings."""
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p)
            for p in parts]
    return np.random.SeedSequence(ints)


class _ImageStore:
    """Raw training images plus per-view deterministic crops, loaded once."""

    def __init__(self, root, records: Sequence[SampleRecord],
                 interpolation: str):
        self.records = list(records)
        self.raw = [load_image(root, r) for r in self.records]
        self.interpolation = interpolation
        self._crops: Dict[str, List[np.ndarray]] = {}

    def crops(self, spec: ViewSpec) -> List[np.ndarray]:
        if spec.name not in self._crops:
            self._crops[spec.name] = [
                crop_view(im, spec, self.interpolation) for im in self.raw]
        return self._crops[spec.name]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        chunk = order[i:i + batch_size]
        if len(chunk) >= 2:  # batch norm needs more than one sample
            yield chunk


class _JsonlLog:
    def __init__(self, path: Optional[Path]):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


@dataclass
class TrainResult:
    checkpoint: Path
    epoch_losses: List[float]
    step_losses: List[float]
    counters: Optional[MaskCounters] = None


def train_view_model(config: FDConfig, spec: ViewSpec,
                     manifest: DatasetManifest, out_path, *,
                     role: str = "teacher",
                     log_path=None) -> TrainResult:
    """Train one per-view model (or the initial holistic student) with the
    identity classification loss only."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    label_map = manifest.train_label_map
    n_classes = manifest.n_train_classes

    if role == "student_initial":
        if not spec.is_holistic:
            raise ValueError("the initial student trains on the holistic view")
        backbone, width = config.student.backbone, config.student.width
        emb_dim = config.student.embedding_dim
        pretrained = config.student.pretrained
    else:
        backbone, width = config.teacher.backbone, config.teacher.width
        emb_dim = config.teacher_dim(spec.name)
        pretrained = config.teacher.pretrained
    stage = (AugmentStage.HOLISTIC_OR_INITIAL_STUDENT if spec.is_holistic
             else AugmentStage.PARTIAL_TEACHER)

    torch.manual_seed(derive_seed(config.seed, role, spec.name).generate_state(1)[0])
    model = ViewModel(backbone, width, emb_dim, n_classes,
                      config.pool_kernel, pretrained=pretrained)
    optimizer = make_sgd(model, config.optim)
    sched = config.teacher_schedule
    records = manifest.train_records
    store = _ImageStore(manifest.root, records, config.augment.interpolation)
    crops = store.crops(spec)
    labels_all = np.array([label_map[r.identity] for r in records])
    log = _JsonlLog(Path(log_path) if log_path else None)

    step = 0
    epoch_losses: List[float] = []
    step_losses: List[float] = []
    wrote_checkpoint = False
    for epoch in range(sched.epochs):
        lr = lr_at(config.optim.lr, sched.halve_every, epoch)
        set_lr(optimizer, lr)
        rng = np.random.default_rng(derive_seed(config.seed, role, spec.name,
                                                "shuffle", epoch))
        model.train()
        epoch_total, epoch_count = 0.0, 0
        for idx in _batches(len(crops), config.optim.batch_size, rng):
            images = []
            for i in idx:
                seed = derive_seed(config.seed, role, spec.name, epoch, int(i))
                img, _, _ = augment(crops[i], stage, seed, config.augment)
                images.append(img)
            x = image_batch_to_tensor(images, config.normalize_mean,
                                      config.normalize_std)
            y = torch.from_numpy(labels_all[idx])
            _, _, _, z = model(x)
            loss = cls_loss(z, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}",
                    last_checkpoint=out_path if wrote_checkpoint else None)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            loss_value = float(loss.detach())
            step_losses.append(loss_value)
            epoch_total += loss_value * len(idx)
            epoch_count += len(idx)
            log.write({"step": step, "epoch": epoch, "lr": lr,
                       "loss": loss_value})
        epoch_losses.append(epoch_total / max(1, epoch_count))
        save_checkpoint(out_path, model, config, role=f"{role}:{spec.name}",
                        epoch=epoch, metrics={"train_loss": epoch_losses[-1]})
        wrote_checkpoint = True
    return TrainResult(out_path, epoch_losses, step_losses)


def _branch_zeros(names) -> Dict[str, torch.Tensor]:
    return {n: torch.zeros(()) for n in names}


def train_student_fd(config: FDConfig, manifest: DatasetManifest,
                     cache: SRCache, init_checkpoint, out_path, *,
                     alpha: Optional[float] = None,
                     beta: Optional[float] = None,
                     log_path=None) -> TrainResult:
    """Step 3: joint training of the final student against the cached SRs.

    The student (backbone, embedding, classifier) starts from the initial
    holistic student checkpoint; the factorization branches start fresh.
    Per-sample, per-view masks drop regression terms for views erased by
    more than the overlap threshold.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    alpha = config.loss_alpha if alpha is None else alpha
    beta = config.loss_beta if beta is None else beta
    active = config.active_views()
    weights = LossWeights(alpha=alpha, beta=beta, view_count=len(active))
    label_map = manifest.train_label_map

    torch.manual_seed(derive_seed(config.seed, "student_fd").generate_state(1)[0])
    model = FDStudent(config, manifest.n_train_classes)
    state, _ = load_checkpoint(init_checkpoint,
                               expected_config_hash=config.config_hash())
    model.load_holistic_init(state)
    optimizer = make_sgd(model, config.optim)
    sched = config.student_schedule
    hol = config.holistic_view
    records = manifest.train_records
    store = _ImageStore(manifest.root, records, config.augment.interpolation)
    crops = store.crops(hol)
    labels_all = np.array([label_map[r.identity] for r in records])
    sample_ids = [r.path for r in records]
    counters = MaskCounters()
    log = _JsonlLog(Path(log_path) if log_path else None)
    run_attr, run_metric = alpha != 0.0, beta != 0.0

    # SR targets for all active views, in manifest order
    targets: Dict[str, torch.Tensor] = {}
    for v in active:
        arr = cache.read_batch(sample_ids, v.name)
        targets[v.name] = torch.from_numpy(arr.astype(np.float32))

    step = 0
    epoch_losses: List[float] = []
    step_losses: List[float] = []
    wrote_checkpoint = False
    for epoch in range(sched.epochs):
        lr = lr_at(config.optim.lr, sched.halve_every, epoch)
        set_lr(optimizer, lr)
        rng = np.random.default_rng(derive_seed(config.seed, "student_fd",
                                                "shuffle", epoch))
        model.train()
        epoch_total, epoch_count = 0.0, 0
        for idx in _batches(len(crops), config.optim.batch_size, rng):
            images = []
            overlaps = np.zeros((len(idx), len(active)))
            for bi, i in enumerate(idx):
                seed = derive_seed(config.seed, "student_fd", epoch, int(i))
                img, _, erase = augment(crops[i], AugmentStage.FINAL_STUDENT,
                                        seed, config.augment)
                images.append(img)
                for ki, v in enumerate(active):
                    overlaps[bi, ki] = erase_overlap_fraction(
                        erase, v, hol.out_height, hol.out_width)
            masks = view_masks(overlaps)
            x = image_batch_to_tensor(images, config.normalize_mean,
                                      config.normalize_std)
            y = torch.from_numpy(labels_all[idx])
            out = model(x, run_attr=run_attr, run_metric=run_metric)
            l_cls = cls_loss(out.logits, y)
            idx_t = torch.from_numpy(np.asarray(idx))
            attr_terms, metric_terms = {}, {}
            for ki, v in enumerate(active):
                tgt = targets[v.name][idx_t]
                mask = masks[:, ki]
                attr_terms[v.name] = (
                    regression_loss(tgt, out.attr[v.name], mask, counters)
                    if run_attr else torch.zeros(()))
                metric_terms[v.name] = (
                    regression_loss(tgt, out.metric[v.name], mask, counters)
                    if run_metric else torch.zeros(()))
            loss, breakdown = total_loss(l_cls, attr_terms, metric_terms,
                                         weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}",
                    last_checkpoint=out_path if wrote_checkpoint else None)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            loss_value = float(loss.detach())
            step_losses.append(loss_value)
            epoch_total += loss_value * len(idx)
            epoch_count += len(idx)
            log.write({"step": step, "epoch": epoch, "lr": lr,
                       "masked": int((~masks).sum()), **breakdown})
        epoch_losses.append(epoch_total / max(1, epoch_count))
        save_checkpoint(out_path, model, config, role="student_fd",
                        epoch=epoch,
                        metrics={"train_loss": epoch_losses[-1]},
                        extra={"alpha": alpha, "beta": beta,
                               "mask_counters": counters.as_dict()})
        wrote_checkpoint = True
    return TrainResult(out_path, epoch_losses, step_losses, counters)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def load_view_model(config: FDConfig, spec: ViewSpec, n_classes: int,
                    checkpoint, *, role: str = "teacher") -> ViewModel:
    if role == "student_initial":
        backbone, width = config.student.backbone, config.student.width
        emb_dim = config.student.embedding_dim
    else:
        backbone, width = config.teacher.backbone, config.teacher.width
        emb_dim = config.teacher_dim(spec.name)
    model = ViewModel(backbone, width, emb_dim, n_classes, config.pool_kernel)
    state, _ = load_checkpoint(checkpoint,
                               expected_config_hash=config.config_hash())
    model.load_state_dict(state)
    model.eval()
    return model


def load_student(config: FDConfig, n_classes: int, checkpoint) -> FDStudent:
    model = FDStudent(config, n_classes)
    state, _ = load_checkpoint(checkpoint,
                               expected_config_hash=config.config_hash())
    model.load_state_dict(state)
    model.eval()
    return model


@dataclass
class PipelineResult:
    out_dir: Path
    teacher_checkpoints: Dict[str, Path]
    initial_student: Path
    cache_dir: Path
    final_student: Path
    report: dict
    artifacts: Path


class _State:
    """Step-granular resume state, bound to one config hash."""

    def __init__(self, path: Path, config_hash: str):
        self.path = path
        if path.exists():
            data = json.loads(path.read_text())
            if data["config_hash"] != config_hash:
                raise RuntimeError(
                    f"refusing to resume: {path} belongs to config "
                    f"{data['config_hash'][:12]}..., current is "
                    f"{config_hash[:12]}...")
            self.data = data
        else:
            self.data = {"config_hash": config_hash, "done": []}

    def done(self, key: str) -> bool:
        return key in self.data["done"]

    def mark(self, key: str) -> None:
        if key not in self.data["done"]:
            self.data["done"].append(key)
        self.path.write_text(json.dumps(self.data, indent=1))


def run_pipeline(config: FDConfig, data_root, out_dir,
                 protocol: str = "standard") -> PipelineResult:
    """Execute the three training steps plus evaluation, resumably.

    Step 1 trains one teacher per registered view and the initial holistic
    student; Step 2 extracts and caches all SRs; Step 3 trains the final
    student under the total loss; the final student is then evaluated on
    the query/gallery splits.  A state file makes reruns skip completed
    steps; a config change refuses to resume.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = _State(out / "state.json", config.config_hash())
    config.to_yaml(out / "config.yaml")
    from .datasets import ingest
    manifest = ingest(data_root, scheme=config.dataset_scheme)
    n_classes = manifest.n_train_classes

    # Step 1: per-view teachers + initial student
    teacher_ckpts: Dict[str, Path] = {}
    for spec in config.views:
        ck = out / "teachers" / f"{spec.name}.pt"
        key = f"step1/teacher:{spec.name}"
        if not (state.done(key) and ck.exists()):
            train_view_model(config, spec, manifest, ck, role="teacher",
                             log_path=out / "logs" / f"teacher_{spec.name}.jsonl")
            state.mark(key)
        teacher_ckpts[spec.name] = ck
    init_ck = out / "student_initial.pt"
    if not (state.done("step1/student_initial") and init_ck.exists()):
        train_view_model(config, config.holistic_view, manifest, init_ck,
                         role="student_initial",
                         log_path=out / "logs" / "student_initial.jsonl")
        state.mark("step1/student_initial")

    # Step 2: SR cache over the active (distilling) views
    cache_dir = out / "sr_cache"
    active = config.active_views()
    if not state.done("step2/sr_cache"):
        teachers, specs, dims = {}, {}, {}
        for spec in active:
            model = load_view_model(config, spec, n_classes,
                                    teacher_ckpts[spec.name])
            teachers[spec.name] = make_embed_fn(model, config.normalize_mean,
                                                config.normalize_std)
            specs[spec.name] = spec
            dims[spec.name] = config.teacher_dim(spec.name)
        raw = {r.path: load_image(manifest.root, r)
               for r in manifest.train_records}
        build_cache(teachers, specs, dims,
                    [r.path for r in manifest.train_records],
                    raw.__getitem__, cache_dir,
                    config_hash=config.config_hash(),
                    dataset_fingerprint=manifest.fingerprint,
                    interpolation=config.augment.interpolation)
        state.mark("step2/sr_cache")
    cache = SRCache.open(cache_dir, expected_fingerprint=manifest.fingerprint,
                         expected_config_hash=config.config_hash())

    # Step 3: final student
    final_ck = out / "student_fd.pt"
    if not (state.done("step3/student_fd") and final_ck.exists()):
        train_student_fd(config, manifest, cache, init_ck, final_ck,
                         log_path=out / "logs" / "student_fd.jsonl")
        state.mark("step3/student_fd")

    # Evaluation
    student = load_student(config, n_classes, final_ck)
    embed = make_embed_fn(student, config.normalize_mean, config.normalize_std)
    result = evaluate_model(embed, manifest, config.holistic_view,
                            protocol=protocol,
                            interpolation=config.augment.interpolation)
    write_report(result, out / "report")
    state.mark("step4/eval")

    artifacts = {
        "config": str(out / "config.yaml"),
        "teachers": {k: str(v) for k, v in teacher_ckpts.items()},
        "student_initial": str(init_ck),
        "sr_cache": str(cache_dir),
        "student_fd": str(final_ck),
        "report": str(out / "report.json"),
    }
    artifacts_path = out / "artifacts.json"
    artifacts_path.write_text(json.dumps(artifacts, indent=1))
    return PipelineResult(out, teacher_ckpts, init_ck, cache_dir, final_ck,
                          result.summary(), artifacts_path)
