"""Schedules, optimizer grouping, gradient isolation, determinism, and the
resumable pipeline."""
import dataclasses
import json

import numpy as np
import pytest
import torch

from viewdistill.config import OptimConfig
from viewdistill.losses import cls_loss, total_loss, LossWeights
from viewdistill.models import FDStudent, ViewModel
from viewdistill.srstore import CacheKeyError, SRCache, build_cache
from viewdistill.trainer import (TrainingDiverged, lr_at, make_sgd,
                                 run_pipeline, train_student_fd,
                                 train_view_model)

from conftest import micro_config


class TestLrSchedule:
    def test_published_values(self):
        assert lr_at(0.0025, 20, 0) == 0.0025
        assert lr_at(0.0025, 20, 20) == 0.00125
        assert lr_at(0.0025, 15, 45) == 0.0025 / 8

    def test_piecewise_constant_and_nonincreasing(self):
        values = [lr_at(0.0025, 5, e) for e in range(40)]
        for e in range(1, 40):
            assert values[e] <= values[e - 1]
            if e % 5 != 0:
                assert values[e] == values[e - 1]
            else:
                assert values[e] == values[e - 1] / 2

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at(0.1, 10, -1)


class TestOptimizerGroups:
    def test_bn_parameters_not_decayed(self):
        model = ViewModel("ref", 4, 8, 4, 2)
        opt = make_sgd(model, OptimConfig(weight_decay=0.01, momentum=0.0))
        decayed, undecayed = opt.param_groups
        assert decayed["weight_decay"] == 0.01
        assert undecayed["weight_decay"] == 0.0
        bn_weight = model.embedding.bn.weight
        assert any(p is bn_weight for p in undecayed["params"])

        # zero gradients: only weight decay can move parameters
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        conv_before = model.backbone.stem[0].weight.clone()
        bn_before = bn_weight.clone()
        opt.step()
        assert not torch.equal(model.backbone.stem[0].weight, conv_before)
        assert torch.equal(bn_weight, bn_before)


class TestGradientIsolation:
    def test_zero_weight_step_leaves_branches_untouched(self, micro_manifest):
        cfg = micro_config()
        torch.manual_seed(0)
        model = FDStudent(cfg, n_classes=6)
        opt = make_sgd(model, cfg.optim)
        x = torch.randn(4, 3, 32, 16)
        y = torch.tensor([0, 1, 2, 3])
        out = model(x, run_attr=False, run_metric=False)
        weights = LossWeights(0.0, 0.0, len(cfg.views))
        zeros = {v.name: torch.zeros(()) for v in cfg.views}
        loss, _ = total_loss(cls_loss(out.logits, y), zeros, zeros, weights)
        branch_before = {k: v.clone() for k, v in model.state_dict().items()
                        if k.startswith(("fmfb_", "rfb_"))}
        core_before = model.embedding.fc.weight.clone()
        opt.zero_grad()
        loss.backward()
        opt.step()
        after = model.state_dict()
        for k, v in branch_before.items():
            assert torch.equal(after[k], v), k
        assert not torch.equal(model.embedding.fc.weight, core_before)


class TestTeacherTraining:
    def test_loss_decreases_on_smoke_run(self, tmp_path):
        # 8-identity smoke dataset with mild nuisances; threshold (>= 4 of 5
        # transitions strictly decreasing) frozen after seed sweeps
        from viewdistill.datasets import SyntheticSpec, generate_synthetic, ingest
        spec = SyntheticSpec(n_train_ids=8, n_test_ids=3, images_per_id=8,
                             test_images_per_id=4, height=32, width=16,
                             seed=11, jitter=12.0, occlusion_rate=0.1,
                             test_occlusion_rate=0.2, illumination=0.3)
        generate_synthetic(spec, tmp_path / "smoke")
        manifest = ingest(tmp_path / "smoke")
        cfg = dataclasses.replace(micro_config(epochs=6),
                                  optim=OptimConfig(batch_size=8, lr=0.004))
        res = train_view_model(cfg, cfg.holistic_view, manifest,
                               tmp_path / "hol.pt", role="teacher")
        drops = sum(b < a for a, b in zip(res.epoch_losses, res.epoch_losses[1:]))
        assert drops >= 4

    def test_seeded_rerun_reproduces_loss_trace(self, micro_manifest, tmp_path):
        cfg = micro_config(epochs=2)
        a = train_view_model(cfg, cfg.view("up1"), micro_manifest,
                             tmp_path / "a.pt", role="teacher")
        b = train_view_model(cfg, cfg.view("up1"), micro_manifest,
                             tmp_path / "b.pt", role="teacher")
        assert a.step_losses == b.step_losses
        assert a.epoch_losses == b.epoch_losses

    def test_divergence_aborts_with_last_checkpoint(self, micro_manifest,
                                                    tmp_path):
        cfg = micro_config(epochs=4)
        cfg = dataclasses.replace(cfg, optim=OptimConfig(batch_size=8, lr=1e9))
        with pytest.raises(TrainingDiverged) as err:
            train_view_model(cfg, cfg.holistic_view, micro_manifest,
                             tmp_path / "d.pt", role="teacher")
        # blew up after at least one finished epoch: checkpoint retained
        if err.value.last_checkpoint is not None:
            assert err.value.last_checkpoint.exists()

    def test_writes_structured_log(self, micro_manifest, tmp_path):
        cfg = micro_config(epochs=1)
        train_view_model(cfg, cfg.holistic_view, micro_manifest,
                         tmp_path / "m.pt", role="teacher",
                         log_path=tmp_path / "log.jsonl")
        records = [json.loads(line)
                   for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert records
        assert {"step", "epoch", "lr", "loss"} <= set(records[0])


def _micro_pipeline(tmp_path, micro_dataset, seed=0, epochs=1):
    cfg = micro_config(seed=seed, epochs=epochs)
    return cfg, run_pipeline(cfg, micro_dataset, tmp_path / "run")


class TestPipeline:
    def test_fresh_run_inventory(self, micro_dataset, tmp_path):
        cfg, result = _micro_pipeline(tmp_path, micro_dataset)
        assert len(result.teacher_checkpoints) == 7
        for ck in result.teacher_checkpoints.values():
            assert ck.exists()
        assert result.initial_student.exists()
        assert result.final_student.exists()
        assert sorted(p.name for p in result.cache_dir.glob("sr_*.bin")) == [
            f"sr_{v}.bin" for v in sorted(x.name for x in cfg.views)]
        assert result.artifacts.exists()
        assert (result.out_dir / "report.txt").exists()
        report = json.loads((result.out_dir / "report.json").read_text())
        assert 0.0 <= report["rank1"] <= 1.0
        assert 0.0 <= report["mAP"] <= 1.0

    def test_rerun_skips_completed_steps(self, micro_dataset, tmp_path):
        cfg, result = _micro_pipeline(tmp_path, micro_dataset)
        mtime = result.final_student.stat().st_mtime_ns
        run_pipeline(cfg, micro_dataset, tmp_path / "run")
        assert result.final_student.stat().st_mtime_ns == mtime

    def test_config_change_refuses_resume(self, micro_dataset, tmp_path):
        cfg, _ = _micro_pipeline(tmp_path, micro_dataset)
        changed = dataclasses.replace(cfg, seed=cfg.seed + 1)
        with pytest.raises(RuntimeError, match="refusing to resume"):
            run_pipeline(changed, micro_dataset, tmp_path / "run")

    def test_state_file_tracks_steps(self, micro_dataset, tmp_path):
        _, result = _micro_pipeline(tmp_path, micro_dataset)
        state = json.loads((result.out_dir / "state.json").read_text())
        assert "step2/sr_cache" in state["done"]
        assert "step3/student_fd" in state["done"]


class TestStudentTraining:
    def test_stale_cache_aborts(self, micro_dataset, micro_manifest, tmp_path):
        cfg, result = _micro_pipeline(tmp_path, micro_dataset)
        # rebuild a cache that lacks most samples, then train against it
        full = SRCache.open(result.cache_dir)
        few = {v: full.sample_ids(v)[:2] for v in full.views}
        import numpy as np

        def fake_embed(img):
            return np.zeros(4, dtype=np.float32)

        specs = {v.name: v for v in cfg.views}
        dims = {v.name: cfg.teacher_dim(v.name) for v in cfg.views}
        teachers = {v.name: (lambda img, d=dims[v.name]:
                             np.zeros(d, dtype=np.float32))
                    for v in cfg.views}
        stale, _ = build_cache(
            teachers, specs, dims, few["holistic"],
            lambda sid: np.zeros((32, 16, 3), dtype=np.uint8),
            tmp_path / "stale", config_hash=cfg.config_hash(),
            dataset_fingerprint=micro_manifest.fingerprint)
        with pytest.raises(CacheKeyError):
            train_student_fd(cfg, micro_manifest, stale,
                             result.initial_student, tmp_path / "s.pt")

    def test_alpha_beta_zero_is_pure_cls_training(
            self, micro_dataset, micro_manifest, tmp_path):
        cfg, result = _micro_pipeline(tmp_path, micro_dataset)
        cache = SRCache.open(result.cache_dir)
        train_student_fd(cfg, micro_manifest, cache, result.initial_student,
                         tmp_path / "b.pt", alpha=0.0, beta=0.0,
                         log_path=tmp_path / "b.jsonl")
        for line in (tmp_path / "b.jsonl").read_text().splitlines():
            rec = json.loads(line)
            assert rec["total"] == rec["cls"]
            assert all(rec[k] == 0.0 for k in rec
                       if k.startswith(("attr/", "metric/")))

    def test_mask_counter_reported(self, micro_dataset, micro_manifest,
                                   tmp_path):
        cfg, result = _micro_pipeline(tmp_path, micro_dataset)
        cache = SRCache.open(result.cache_dir)
        res = train_student_fd(cfg, micro_manifest, cache,
                               result.initial_student, tmp_path / "c.pt",
                               log_path=tmp_path / "log.jsonl")
        assert res.counters is not None
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        rec = json.loads(lines[0])
        assert "masked" in rec and "cls" in rec and "total" in rec
        assert any(k.startswith("attr/") for k in rec)
