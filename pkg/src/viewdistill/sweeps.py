"""Config-driven ablation sweeps.

Both sweeps share Steps 1-2 (teachers and the SR cache) and retrain only the
final student per variant: the loss sweep toggles the two regression weights,
the teacher sweep restricts which views supervise the student.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

from .config import FDConfig
from .datasets import ingest
from .evaluator import evaluate_model
from .models import make_embed_fn
from .srstore import SRCache
from .trainer import load_student, run_pipeline, train_student_fd
from .views import GROUP1, GROUP2, HOLISTIC


@dataclass
class SweepRow:
    variant: str
    rank1: float
    mean_ap: float

    def as_dict(self) -> dict:
        return {"variant": self.variant, "rank1": self.rank1,
                "mAP": self.mean_ap}


def format_table(rows: Sequence[SweepRow], title: str) -> str:
    width = max(len(r.variant) for r in rows)
    lines = [title, f"{'variant'.ljust(width)}  rank1   mAP"]
    for r in rows:
        lines.append(f"{r.variant.ljust(width)}  {r.rank1:.4f}  {r.mean_ap:.4f}")
    return "\n".join(lines)


def _write_sweep_report(rows: List[SweepRow], out: Path, name: str,
                        title: str) -> None:
    (out / f"{name}.json").write_text(
        json.dumps([r.as_dict() for r in rows], indent=1))
    (out / f"{name}.txt").write_text(format_table(rows, title) + "\n")


def _eval_variant(config: FDConfig, manifest, checkpoint) -> Tuple[float, float]:
    student = load_student(config, manifest.n_train_classes, checkpoint)
    embed = make_embed_fn(student, config.normalize_mean, config.normalize_std)
    res = evaluate_model(embed, manifest, config.holistic_view,
                         interpolation=config.augment.interpolation)
    return res.rank1, res.mean_ap


def run_loss_ablation(config: FDConfig, data_root, out_dir) -> List[SweepRow]:
    """Sweep {cls only, +attr, +metric, +both} over the regression weights."""
    out = Path(out_dir)
    base = run_pipeline(config, data_root, out / "base")
    manifest = ingest(data_root, scheme=config.dataset_scheme)
    cache = SRCache.open(base.cache_dir,
                         expected_fingerprint=manifest.fingerprint,
                         expected_config_hash=config.config_hash())
    variants = [
        ("cls", 0.0, 0.0),
        ("cls+attr", config.loss_alpha, 0.0),
        ("cls+metric", 0.0, config.loss_beta),
        ("cls+attr+metric", config.loss_alpha, config.loss_beta),
    ]
    rows = []
    for name, alpha, beta in variants:
        ck = out / f"student_{name.replace('+', '_')}.pt"
        if not ck.exists():
            train_student_fd(config, manifest, cache, base.initial_student,
                             ck, alpha=alpha, beta=beta)
        rank1, mean_ap = _eval_variant(config, manifest, ck)
        rows.append(SweepRow(name, rank1, mean_ap))
    _write_sweep_report(rows, out, "loss_ablation", "loss ablation")
    return rows


TEACHER_SETS = (
    ("hol", (HOLISTIC,)),
    ("hol+g1", (HOLISTIC,) + GROUP1),
    ("hol+g1+g2", (HOLISTIC,) + GROUP1 + GROUP2),
)


def run_teacher_ablation(config: FDConfig, data_root, out_dir,
                         teacher_sets=TEACHER_SETS) -> List[SweepRow]:
    """Sweep over which teachers supervise the student: holistic only, plus
    partial group 1, plus both groups."""
    out = Path(out_dir)
    base = run_pipeline(config, data_root, out / "base")
    manifest = ingest(data_root, scheme=config.dataset_scheme)
    rows = []
    for name, subset in teacher_sets:
        sub_cfg = replace(config, teacher_subset=tuple(subset))
        # the cache was written under the base config; reopen it as such
        cache = SRCache.open(base.cache_dir,
                             expected_fingerprint=manifest.fingerprint,
                             expected_config_hash=config.config_hash())
        ck = out / f"student_{name.replace('+', '_')}.pt"
        if not ck.exists():
            train_student_fd(sub_cfg, manifest, cache,
                             _reinit_for(sub_cfg, base.initial_student, out,
                                         name, manifest, data_root),
                             ck)
        rank1, mean_ap = _eval_variant(sub_cfg, manifest, ck)
        rows.append(SweepRow(name, rank1, mean_ap))
    _write_sweep_report(rows, out, "teacher_ablation", "teacher ablation")
    return rows


def _reinit_for(sub_cfg: FDConfig, initial_student, out: Path, name: str,
                manifest, data_root):
    """The initial student checkpoint carries the base config hash; rewrite
    it under the subset config so loading stays strict."""
    from .models import load_checkpoint, save_checkpoint, ViewModel

    state, man = load_checkpoint(initial_student)
    model = ViewModel(sub_cfg.student.backbone, sub_cfg.student.width,
                      sub_cfg.student.embedding_dim, manifest.n_train_classes,
                      sub_cfg.pool_kernel)
    model.load_state_dict(state)
    path = out / f"init_{name.replace('+', '_')}.pt"
    save_checkpoint(path, model, sub_cfg, role="student_initial",
                    epoch=man["epoch"])
    return path
