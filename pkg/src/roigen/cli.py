"""Command-line surface: preprocess | train-vqgan | train-transformer |
generate | evaluate | classify | report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import classifier, metrics, training, volumes


def _out_dir(args) -> str:
    return os.environ.get("ROIGEN_OUT_DIR", getattr(args, "out_dir", ".") or ".")


def _load_config(args) -> training.RunConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.config:
        return training.parse_config(args.config, overrides)
    return training.RunConfig(**overrides)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    p.add_argument("--out-dir", help="output directory (env ROIGEN_OUT_DIR overrides)")


def cmd_preprocess(args) -> int:
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    if args.synthetic:
        entries = []
        for i in range(args.synthetic):
            v = volumes.make_synthetic_roi(args.seed_base + i, edge=args.edge,
                                           blobs=args.blobs)
            split = "test" if i >= int(args.synthetic * 0.8) and args.synthetic > 4 else "train"
            name = f"roi_{i:04d}.vq3d"
            volumes.save_volume(os.path.join(out, name), v)
            entries.append(volumes.ManifestEntry(name, args.label, split))
        volumes.write_manifest(os.path.join(out, "manifest.tsv"), entries)
        print(f"wrote {len(entries)} synthetic ROIs to {out}")
        return 0
    if not (args.brain and args.mask and args.out):
        print("preprocess: need either --synthetic N or --brain/--mask/--out", file=sys.stderr)
        return 1
    brain = volumes.load_volume(args.brain)
    mask = volumes.load_volume(args.mask)
    roi = volumes.extract_roi(brain, mask, args.target)
    volumes.save_volume(args.out, volumes.normalize(roi))
    print(f"wrote {args.out}")
    return 0


def cmd_train_vqgan(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    vols = volumes.load_manifest_volumes(args.manifest, split="train")
    resume = training.load_checkpoint(args.resume) if args.resume else None
    training.train_stage1(cfg, vols,
                          log_path=os.path.join(out, "stage1_loss.jsonl"),
                          checkpoint_path=os.path.join(out, "stage1.pt"),
                          resume_from=resume)
    print(f"stage-1 checkpoint: {os.path.join(out, 'stage1.pt')}")
    return 0


def cmd_train_transformer(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    vols = volumes.load_manifest_volumes(args.manifest, split="train")
    s1 = training.load_checkpoint(args.stage1)
    training.train_stage2(cfg, s1, vols,
                          log_path=os.path.join(out, "stage2_loss.jsonl"),
                          checkpoint_path=os.path.join(out, "stage2.pt"))
    print(f"stage-2 checkpoint: {os.path.join(out, 'stage2.pt')}")
    return 0


def cmd_generate(args) -> int:
    out = _out_dir(args)
    s1 = training.load_checkpoint(args.stage1)
    s2 = training.load_checkpoint(args.stage2)
    entries = training.generate_batch(s1, s2, args.num_samples,
                                     args.seed if args.seed is not None else 0,
                                     out, fmt=args.format)
    print(f"wrote {len(entries)} samples to {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .networks import PerceptualExtractor
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    real = volumes.load_manifest_volumes(args.real)
    gen = volumes.load_manifest_volumes(args.gen)
    extractor = PerceptualExtractor(seed=0)
    report = metrics.MetricsReport()
    report.add("mmd2", metrics.mmd2(real, gen, batch_size=args.mmd_batch,
                                    tests=args.mmd_tests, seed=seed),
               kernel="linear", batch=args.mmd_batch, tests=args.mmd_tests, seed=seed)
    report.add("ms_ssim_gen", metrics.ms_ssim_pairwise(gen, pairs=args.pairs, seed=seed),
               pairs=args.pairs, seed=seed, slice_policy="all-axial")
    report.add("ms_ssim_real", metrics.ms_ssim_pairwise(real, pairs=args.pairs, seed=seed),
               pairs=args.pairs, seed=seed, slice_policy="all-axial")
    for plane in ("axial", "coronal", "sagittal"):
        report.add(f"fid_{plane}", metrics.fid_plane(real, gen, plane, extractor),
                   extractor="random-seed0", slice_policy="all-slices")
    path = os.path.join(out, "metrics.jsonl")
    os.makedirs(out, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(report.as_lines()) + "\n")
    for e in report.entries:
        print(f"{e['metric']:>14s}  {e['value']:.6f}")
    print(f"report: {path}")
    return 0


def cmd_classify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    plan = classifier.TrialPlan(protocol=args.protocol, trials=args.trials, seed=seed)
    ccfg = classifier.ClassifierConfig(preset=args.preset, epochs=args.epochs)
    data = _load_classification_data(args)
    result = classifier.run_protocol(plan, ccfg, data)
    for r in result["trials"]:
        print(f"trial {r['trial']}: " + "  ".join(
            f"{k}={r[k]:.3f}" for k in ("auc", "f1", "accuracy", "precision", "recall")))
    for k, (m, s) in result["aggregate"].items():
        print(f"{k:>10s}: {m:.3f} +/- {s:.3f}")
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "classify.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    return 0


def _load_classification_data(args) -> dict:
    entries = volumes.read_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    labels = sorted({e.label for e in entries})
    if len(labels) != 2:
        raise ValueError(f"need exactly 2 classes, got {labels}")
    counts = {l: sum(e.label == l for e in entries) for l in labels}
    minority = min(labels, key=lambda l: counts[l])
    data = {"train": [], "test": []}
    for e in entries:
        p = e.path if os.path.isabs(e.path) else os.path.join(base, e.path)
        sample = (volumes.load_volume(p), int(e.label == minority))
        key = "test" if e.split == "test" else "train"
        data[key].append(sample)
    if args.synthetic_manifest:
        data["synthetic"] = volumes.load_manifest_volumes(args.synthetic_manifest)
    return data


def cmd_report(args) -> int:
    by_name: dict[str, list[float]] = {}
    with open(args.log, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            name = rec.get("metric") or rec.get("component")
            by_name.setdefault(name, []).append(rec["value"])
    print(f"{'name':>16s} {'n':>6s} {'mean':>12s} {'sd':>12s}")
    for name in sorted(by_name):
        vals = np.asarray(by_name[name])
        print(f"{name:>16s} {len(vals):6d} {vals.mean():12.6f} {vals.std():12.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roigen",
                                description="3D tumor-ROI generative pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="extract ROIs or build a synthetic dataset")
    _add_common(sp)
    sp.add_argument("--brain")
    sp.add_argument("--mask")
    sp.add_argument("--out")
    sp.add_argument("--target", type=int, default=128)
    sp.add_argument("--synthetic", type=int, default=0, help="generate N synthetic ROIs")
    sp.add_argument("--edge", type=int, default=32)
    sp.add_argument("--blobs", type=int, default=3)
    sp.add_argument("--label", default="roi")
    sp.add_argument("--seed-base", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train-vqgan", help="stage-1 training")
    _add_common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train_vqgan)

    sp = sub.add_parser("train-transformer", help="stage-2 training")
    _add_common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--stage1", required=True)
    sp.set_defaults(func=cmd_train_transformer)

    sp = sub.add_parser("generate", help="sample new volumes")
    _add_common(sp)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--stage2", required=True)
    sp.add_argument("--num-samples", type=int, default=1)
    sp.add_argument("--format", choices=("vq3d", "nifti"), default="vq3d")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="metric suite between two sets")
    _add_common(sp)
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--mmd-batch", type=int, default=3)
    sp.add_argument("--mmd-tests", type=int, default=100)
    sp.add_argument("--pairs", type=int, default=1000)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("classify", help="imbalanced classification protocols")
    _add_common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", choices=("a", "b", "c"), default="a")
    sp.add_argument("--synthetic-manifest")
    sp.add_argument("--trials", type=int, default=3)
    sp.add_argument("--preset", choices=("toy", "full"), default="toy")
    sp.add_argument("--epochs", type=int, default=20)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("report", help="aggregate a metrics/loss log")
    _add_common(sp)
    sp.add_argument("--log", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"roigen {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
