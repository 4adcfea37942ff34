"""Command line interface.

Subcommands mirror the pipeline steps (train-teachers, build-sr,
train-student, run-all) plus dataset generation, evaluation, ablation
sweeps, view-registry inspection, and attention-overlay dumps.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _load_config(args):
    from .config import FDConfig

    if args.config:
        return FDConfig.from_yaml(args.config)
    return FDConfig.canonical()


def cmd_dump_views(args) -> int:
    from .config import FDConfig
    from .views import serialize_views

    config = _load_config(args)
    json.dump(serialize_views(config.views), sys.stdout, indent=1)
    print()
    return 0


def cmd_init_config(args) -> int:
    from .config import FDConfig

    config = FDConfig.desk() if args.desk else FDConfig.canonical()
    config.to_yaml(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_make_synthetic(args) -> int:
    from .datasets import SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_train_ids=args.train_ids, n_test_ids=args.test_ids,
                         images_per_id=args.images_per_id, seed=args.seed)
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.train)} train / {len(manifest.query)} query / "
          f"{len(manifest.gallery)} gallery images under {args.out}")
    return 0


def cmd_train_teachers(args) -> int:
    from .datasets import ingest
    from .trainer import train_view_model

    config = _load_config(args)
    manifest = ingest(args.data, scheme=config.dataset_scheme)
    out = Path(args.out)
    for spec in config.views:
        ck = out / "teachers" / f"{spec.name}.pt"
        print(f"training teacher for view {spec.name} -> {ck}")
        train_view_model(config, spec, manifest, ck, role="teacher",
                         log_path=out / "logs" / f"teacher_{spec.name}.jsonl")
    ck = out / "student_initial.pt"
    print(f"training initial student -> {ck}")
    train_view_model(config, config.holistic_view, manifest, ck,
                     role="student_initial",
                     log_path=out / "logs" / "student_initial.jsonl")
    return 0


def cmd_build_sr(args) -> int:
    from .datasets import ingest, load_image
    from .models import make_embed_fn
    from .srstore import build_cache
    from .trainer import load_view_model

    config = _load_config(args)
    manifest = ingest(args.data, scheme=config.dataset_scheme)
    teachers, specs, dims = {}, {}, {}
    for spec in config.active_views():
        ck = Path(args.teachers) / f"{spec.name}.pt"
        model = load_view_model(config, spec, manifest.n_train_classes, ck)
        teachers[spec.name] = make_embed_fn(model, config.normalize_mean,
                                            config.normalize_std)
        specs[spec.name] = spec
        dims[spec.name] = config.teacher_dim(spec.name)
    raw = {r.path: load_image(manifest.root, r)
           for r in manifest.train_records}
    _, report = build_cache(teachers, specs, dims,
                            [r.path for r in manifest.train_records],
                            raw.__getitem__, args.out,
                            config_hash=config.config_hash(),
                            dataset_fingerprint=manifest.fingerprint,
                            interpolation=config.augment.interpolation)
    print(f"cache under {args.out}: {report.new_writes} written, "
          f"{report.repaired} repaired, {report.verified} verified")
    return 0


def cmd_train_student(args) -> int:
    from .datasets import ingest
    from .srstore import SRCache
    from .trainer import train_student_fd

    config = _load_config(args)
    manifest = ingest(args.data, scheme=config.dataset_scheme)
    cache = SRCache.open(args.sr_cache,
                         expected_fingerprint=manifest.fingerprint,
                         expected_config_hash=config.config_hash())
    out = Path(args.out)
    ck = out / "student_fd.pt"
    result = train_student_fd(config, manifest, cache, args.init, ck,
                              log_path=out / "logs" / "student_fd.jsonl")
    print(f"final student -> {result.checkpoint} "
          f"(last epoch loss {result.epoch_losses[-1]:.4f})")
    return 0


def cmd_run_all(args) -> int:
    from .trainer import run_pipeline

    config = _load_config(args)
    result = run_pipeline(config, args.data, args.out, protocol=args.protocol)
    print(json.dumps(result.report, indent=1))
    return 0


def cmd_evaluate(args) -> int:
    from .datasets import ingest
    from .evaluator import dump_features, evaluate_model, write_report
    from .evaluator import extract_split_features
    from .models import make_embed_fn
    from .trainer import load_student

    config = _load_config(args)
    manifest = ingest(args.data, scheme=config.dataset_scheme)
    student = load_student(config, args.classes or manifest.n_train_classes,
                           args.model)
    embed = make_embed_fn(student, config.normalize_mean, config.normalize_std)
    result = evaluate_model(embed, manifest, config.holistic_view,
                            protocol=args.protocol,
                            interpolation=config.augment.interpolation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(result, out / "report")
    if args.dump_features:
        for split, records in (("query", manifest.query),
                               ("gallery", manifest.gallery)):
            feats = extract_split_features(embed, manifest.root, records,
                                           config.holistic_view,
                                           config.augment.interpolation)
            dump_features(out / f"features_{split}.bin", feats,
                          [r.path for r in records], model_id="student_fd",
                          config_hash=config.config_hash(),
                          dataset_fingerprint=manifest.fingerprint)
    print(json.dumps(result.summary(), indent=1))
    return 0


def cmd_attention(args) -> int:
    import torch
    from PIL import Image

    from .blocks import extract_attention_mask
    from .datasets import ingest
    from .models import image_batch_to_tensor, make_embed_fn
    from .trainer import load_student
    from .views import crop_view

    config = _load_config(args)
    with Image.open(args.image) as im:
        image = np.asarray(im.convert("RGB"))
    manifest_classes = args.classes
    if manifest_classes is None:
        if args.data is None:
            raise SystemExit("attention needs --classes or --data to size "
                             "the checkpoint's classifier")
        manifest = ingest(args.data, scheme=config.dataset_scheme)
        manifest_classes = manifest.n_train_classes
    student = load_student(config, manifest_classes, args.model)
    crop = crop_view(image, config.holistic_view,
                     config.augment.interpolation)
    x = image_batch_to_tensor([crop], config.normalize_mean,
                              config.normalize_std)
    with torch.no_grad():
        out = student(x)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    overlay = extract_attention_mask(out.fmap[0], crop)
    Image.fromarray(overlay).save(outdir / "attention_student.png")
    for name in student.view_names:
        with torch.no_grad():
            fk = student.fmfb_featsel[name](out.fmap)[0]
        Image.fromarray(extract_attention_mask(fk, crop)).save(
            outdir / f"attention_{name}.png")
    print(f"wrote overlays to {outdir}")
    return 0


def cmd_sweep(args) -> int:
    from .sweeps import format_table, run_loss_ablation, run_teacher_ablation

    config = _load_config(args)
    if args.axis == "loss":
        rows = run_loss_ablation(config, args.data, args.out)
        print(format_table(rows, "loss ablation"))
    else:
        rows = run_teacher_ablation(config, args.data, args.out)
        print(format_table(rows, "teacher ablation"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewdistill",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("dump-views", cmd_dump_views,
             help="print the view registry as a config block")
    sp.add_argument("--config", default=None)

    sp = add("init-config", cmd_init_config, help="write a starter config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--desk", action="store_true",
                    help="CPU-scale preset instead of the canonical one")

    sp = add("make-synthetic", cmd_make_synthetic,
             help="generate a synthetic desk-scale dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-ids", type=int, default=16)
    sp.add_argument("--test-ids", type=int, default=8)
    sp.add_argument("--images-per-id", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)

    for name, fn in (("train-teachers", cmd_train_teachers),
                     ("run-all", cmd_run_all)):
        sp = add(name, fn)
        sp.add_argument("--config", default=None)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        if name == "run-all":
            sp.add_argument("--protocol", default="standard",
                            choices=("standard", "cross_dataset"))

    sp = add("build-sr", cmd_build_sr, help="extract and cache the SRs")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--teachers", required=True,
                    help="directory holding <view>.pt teacher checkpoints")
    sp.add_argument("--out", required=True)

    sp = add("train-student", cmd_train_student)
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sr-cache", required=True)
    sp.add_argument("--init", required=True,
                    help="initial holistic student checkpoint")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate)
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--protocol", default="standard",
                    choices=("standard", "cross_dataset"))
    sp.add_argument("--classes", type=int, default=None,
                    help="training class count of the checkpoint (defaults "
                         "to the dataset's, wrong for cross-dataset runs)")
    sp.add_argument("--dump-features", action="store_true")

    sp = add("attention", cmd_attention,
             help="write attention overlay images for one input")
    sp.add_argument("--config", default=None)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--classes", type=int, default=None)

    sp = add("sweep", cmd_sweep, help="run a config-driven ablation sweep")
    sp.add_argument("--config", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--axis", required=True, choices=("loss", "teachers"))

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
