"""Command-line entry points: datagen, train, eval, infer, report."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import formats, harness
from .config import SceneConfig, load_train_config, scene_config_from_dict
from .datagen import GeneratorDataset, ManifestDataset, generate_scene
from .errors import ConfigError


def _collect_overrides(extra: list[str]) -> dict:
    """Parse trailing '--dotted.key value' pairs into an override dict."""
    overrides = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r} (expected --key value)")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag --{key} is missing a value")
            val = extra[i + 1]
            i += 1
        overrides[key] = val
        i += 1
    return overrides


def _scene_args(p: argparse.ArgumentParser):
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--max-disparity", type=float, default=64.0)
    p.add_argument("--scene-kind", default="mixed", help="random_dot | slanted_planes | layered_boxes | mixed")
    p.add_argument("--textureless-fraction", type=float, default=0.0)
    p.add_argument("--specular-fraction", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed-base", type=int, default=0)


def _dataset_from_args(args) -> GeneratorDataset | ManifestDataset:
    if getattr(args, "manifest", None):
        return ManifestDataset(args.manifest)
    base = SceneConfig(
        height=args.height,
        width=args.width,
        max_disparity=args.max_disparity,
        scene_kind="slanted_planes" if args.scene_kind == "mixed" else args.scene_kind,
        textureless_fraction=args.textureless_fraction,
        specular_fraction=args.specular_fraction,
        noise_sigma=args.noise_sigma,
    ).validate()
    return GeneratorDataset(base, args.count, args.seed_base, mixed=args.scene_kind == "mixed")


def cmd_datagen(args) -> int:
    out = harness.resolve_out_dir(args.out, "dataset")
    ds = _dataset_from_args(args)
    records = []
    for i in range(len(ds)):
        s = ds[i]
        rec = {"id": f"{i:05d}"}
        rec["left"] = f"{i:05d}_left.png"
        rec["right"] = f"{i:05d}_right.png"
        rec["disparity"] = f"{i:05d}_disp.pfm"
        formats.save_image_png(s.left, os.path.join(out, rec["left"]))
        formats.save_image_png(s.right, os.path.join(out, rec["right"]))
        disp = s.disparity_gt.copy()
        disp[~s.valid_mask] = np.nan
        formats.write_pfm(disp, os.path.join(out, rec["disparity"]))
        if args.png16:
            rec["disparity_png16"] = f"{i:05d}_disp16.png"
            formats.write_disp_png16(np.where(s.valid_mask, s.disparity_gt, np.nan), os.path.join(out, rec["disparity_png16"]))
        for key in ("inframe", "specular", "textureless"):
            if key in s.aux:
                rec[key] = f"{i:05d}_{key}.png"
                formats.save_mask_png(s.aux[key], os.path.join(out, rec[key]))
        records.append(rec)
    formats.write_manifest(records, os.path.join(out, "manifest.jsonl"))
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_train(args, extra) -> int:
    overrides = _collect_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.deterministic is not None:
        overrides["deterministic"] = "true" if args.deterministic else "false"
    tc = load_train_config(args.config, preset=args.preset, overrides=overrides)
    eval_ds = None
    if args.eval_manifest:
        eval_ds = ManifestDataset(args.eval_manifest)
    result = harness.train(tc, out_dir=args.out, eval_dataset=eval_ds, resume=args.resume)
    print(f"done: checkpoint={result.checkpoint} final_loss={result.final_loss:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, tc, step, _, _ = harness.load_checkpoint(args.ckpt)
    ds = _dataset_from_args(args)
    regions = tuple(args.regions.split(","))
    out = harness.resolve_out_dir(args.out, "eval_out")
    result = harness.evaluate(model, ds, regions=regions, out_dir=out, max_samples=args.max_samples, save_vis=args.save_vis)
    for branch in ("stereo", "mono"):
        for rep in result[branch]:
            if rep.sample_id == "aggregate":
                print(f"{branch:6s} region={rep.region:9s} EPE={rep.epe:.3f} BP2={rep.bp.get(2.0, float('nan')):.2f}% D1={rep.d1:.2f}%")
    return 0


def cmd_infer(args) -> int:
    model, _, _, _, _ = harness.load_checkpoint(args.ckpt)
    harness.infer_files(model, args.left, args.right, args.out)
    return 0


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import evalkit

    reports = evalkit.parse_report_csv(args.csv)
    out = harness.resolve_out_dir(args.out, "report_out")
    per_sample = [r for r in reports if r.sample_id != "aggregate"]
    if not per_sample:
        print("no per-sample rows found")
        return 1
    fig, axes = plt.subplots(1, 2, figsize=(11, 3.5))
    ids = [r.sample_id for r in per_sample]
    axes[0].bar(ids, [r.epe for r in per_sample])
    axes[0].set_ylabel("EPE (px)")
    axes[1].bar(ids, [r.bp.get(2.0, 0) for r in per_sample], color="tab:orange")
    axes[1].set_ylabel("BP-2 (%)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=90, labelsize=6)
    fig.tight_layout()
    path = os.path.join(out, "metrics.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="duodepth", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="global RNG seed override")
    p.add_argument("--deterministic", action="store_true", default=None, help="force deterministic mode")
    sub = p.add_subparsers(dest="cmd", required=True)

    d = sub.add_parser("datagen", help="emit a manifest dataset from a scene config")
    _scene_args(d)
    d.add_argument("--count", type=int, default=50)
    d.add_argument("--out", default=None)
    d.add_argument("--png16", action="store_true", help="also write KITTI-style 16-bit disparity PNGs")

    t = sub.add_parser("train", help="train a model (extra --key value pairs override config)")
    t.add_argument("--config", default=None, help="TOML config file")
    t.add_argument("--preset", default="desk", help="desk | overfit | paper_scale")
    t.add_argument("--out", default=None)
    t.add_argument("--resume", default=None)
    t.add_argument("--eval-manifest", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", default=None)
    _scene_args(e)
    e.add_argument("--count", type=int, default=50)
    e.add_argument("--regions", default="all,noc")
    e.add_argument("--max-samples", type=int, default=None)
    e.add_argument("--save-vis", type=int, default=0)
    e.add_argument("--out", default=None)

    i = sub.add_parser("infer", help="run a checkpoint on one image pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--left", required=True)
    i.add_argument("--right", required=True)
    i.add_argument("--out", default=None)

    r = sub.add_parser("report", help="re-render a metrics CSV as plots")
    r.add_argument("--csv", required=True)
    r.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if argv and argv[0] == "train":
        args, extra = parser.parse_known_args(argv)
        return cmd_train(args, extra)
    args = parser.parse_args(argv)
    if args.cmd == "datagen":
        return cmd_datagen(args)
    if args.cmd == "eval":
        return cmd_eval(args)
    if args.cmd == "infer":
        return cmd_infer(args)
    if args.cmd == "report":
        return cmd_report(args)
    raise ConfigError(f"unhandled command {args.cmd}")


if __name__ == "__main__":
    raise SystemExit(main())
