"""Training loop, evaluation driver, and pair inference."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evalkit, formats, kernels
from . import objective as obj
from .config import ModelConfig, SceneConfig, TrainConfig, config_to_dict, train_config_from_dict
from .datagen import StereoSample, augment, dataset_from_spec
from .errors import ConfigError, TrainingAbort
from .model import DualDepthModel
from .optim import AdamW, OneCycleSchedule, clip_grad_norm

OUTPUT_ROOT_ENV = "DUODEPTH_OUT_ROOT"


def resolve_out_dir(out_dir: str | None, default_name: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, ".")
    path = out_dir if out_dir is not None else os.path.join(root, default_name)
    os.makedirs(path, exist_ok=True)
    return path


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(path, model: DualDepthModel, optimizer: AdamW | None, step: int, tc: TrainConfig, rng=None):
    """Single-file archive: parameter arrays under 'param/<dotted path>',
    optimizer moments under 'opt/m|v/<path>', and a JSON 'meta' entry with
    the step, config snapshot and RNG state."""
    arrays = {f"param/{k}": t.data for k, t in model.store.named()}
    meta = {
        "step": int(step),
        "config": config_to_dict(tc),
        "dtype": str(model.store.dtype),
        "rng_state": None if rng is None else rng.bit_generator.state,
        "opt_t": None if optimizer is None else optimizer.t,
    }
    if optimizer is not None:
        arrays.update({f"opt/m/{k}": a for k, a in optimizer.m.items()})
        arrays.update({f"opt/v/{k}": a for k, a in optimizer.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, overrides: ModelConfig | None = None):
    """Returns (model, train_config, step, opt_state_or_None, rng_state)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"].tobytes()).decode("utf-8"))
        tc = train_config_from_dict(meta["config"])
        if overrides is not None and config_to_dict(overrides) != config_to_dict(tc.model):
            raise ConfigError(
                f"checkpoint architecture {config_to_dict(tc.model)} incompatible with requested {config_to_dict(overrides)}"
            )
        model = DualDepthModel(tc.model, seed=tc.seed, dtype=np.dtype(meta["dtype"]))
        state = {k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")}
        model.store.load_state_dict(state)
        opt_state = None
        if meta.get("opt_t") is not None:
            opt_state = {
                "t": meta["opt_t"],
                "m": {k[len("opt/m/") :]: z[k] for k in z.files if k.startswith("opt/m/")},
                "v": {k[len("opt/v/") :]: z[k] for k in z.files if k.startswith("opt/v/")},
            }
    return model, tc, meta["step"], opt_state, meta.get("rng_state")


# -- batching -----------------------------------------------------------------


def _stack_batch(samples: list[StereoSample]):
    return (
        np.stack([s.left for s in samples]),
        np.stack([s.right for s in samples]),
        np.stack([s.disparity_gt for s in samples]),
        np.stack([s.valid_mask for s in samples]),
    )


def draw_batch(dataset, rng, tc: TrainConfig):
    idx = rng.integers(0, len(dataset), size=tc.batch)
    samples = []
    for i in idx:
        s = dataset[int(i)]
        samples.append(
            augment(s, rng, (tc.crop_h, tc.crop_w), stretch_prob=tc.aug_stretch_prob, jitter_prob=tc.aug_jitter_prob)
        )
    return _stack_batch(samples)


def coarse_targets(d_gt: np.ndarray, valid: np.ndarray, n_candidates: int):
    """Median-pooled stride-8 ground truth for proposal supervision."""
    n, h, w = d_gt.shape
    pooled, _ = kernels.median_pool(np.ascontiguousarray(d_gt, dtype=np.float64), 8)
    d8 = pooled / 8.0
    frac = valid.reshape(n, h // 8, 8, w // 8, 8).mean(axis=(2, 4))
    bins = np.clip(np.round(d8), 0, n_candidates - 1).astype(np.int64)
    valid8 = (frac >= 0.5) & (d8 >= 0) & (d8 <= n_candidates - 0.5)
    return bins, valid8, pooled


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: str
    log_path: str
    final_loss: float
    steps_run: int
    eval_epe: float | None


def _quick_epe(model: DualDepthModel, dataset, count: int, rng) -> float:
    vals = []
    wts = []
    for i in range(min(count, len(dataset))):
        s = dataset[i]
        res = model.infer(s.left[None], s.right[None])
        err = np.abs(res.disparity[0] - s.disparity_gt)[s.valid_mask]
        vals.append(float(err.mean()))
        wts.append(err.size)
    return float(np.average(vals, weights=wts))


def train(tc: TrainConfig, out_dir: str | None = None, eval_dataset=None, log_fn=print, resume: str | None = None) -> TrainResult:
    """Run the optimization loop described by tc; returns checkpoint info.

    Deterministic mode uses a fixed seed chain for data and parameters and
    single-threaded kernels, making loss trajectories bit-reproducible on
    the same hardware and backend.
    """
    tc.validate()
    out = resolve_out_dir(out_dir, "train_run")
    dataset = dataset_from_spec(tc.dataset, default_scene=SceneConfig(height=tc.crop_h, width=tc.crop_w, max_disparity=tc.model.max_disparity / 2))
    start_step = 0
    if resume is not None:
        model, _, start_step, opt_state, rng_state = load_checkpoint(resume)
        optimizer = AdamW(model.store, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        rng = np.random.default_rng(tc.seed + 1)
        if rng_state is not None:
            rng.bit_generator.state = rng_state
    else:
        model = DualDepthModel(tc.model, seed=tc.seed, dtype=np.float32)
        optimizer = AdamW(model.store, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
        rng = np.random.default_rng(tc.seed + 1)
    schedule = OneCycleSchedule(tc.peak_lr, tc.steps, warmup_frac=tc.warmup_frac)

    log_path = os.path.join(out, "train_log.jsonl")
    ckpt_path = os.path.join(out, "checkpoint.npz")
    last_good = None
    eval_epe = None
    t_start = time.time()
    with open(log_path, "a", encoding="utf-8") as logf:
        for step in range(start_step, tc.steps):
            left, right, gt, valid = draw_batch(dataset, rng, tc)
            lr = schedule.lr(step)
            try:
                res = model.forward(left, right)
                bins, valid8, d_gt8 = coarse_targets(gt, valid, tc.model.candidates)
                log_probs = ad.log_softmax(res.logits, axis=-1) if tc.lam_prop != 0.0 else None
                bd = obj.total_loss(
                    res.trace.disparities,
                    res.trace.relative_depths,
                    gt,
                    valid,
                    gamma=tc.gamma,
                    lam_mono=tc.lam_mono,
                    lam_prop=tc.lam_prop,
                    prop_log_probs=log_probs,
                    prop_targets=bins,
                    prop_valid=valid8,
                    hyp=res.hypotheses,
                    d_gt8=d_gt8,
                )
                model.store.zero_grad()
                bd.total.backward()
            except TrainingAbort as e:
                log_fn(f"[abort] step {step}: {e}; last good checkpoint: {last_good}")
                raise
            gnorm = clip_grad_norm(model.store, 1.0)
            optimizer.step(lr)

            rec = {
                "step": step,
                "lr": lr,
                "total": bd.total_value,
                "stereo": bd.stereo,
                "mono": bd.mono,
                "proposal": bd.proposal,
                "grad_norm": gnorm,
                "iter_stereo": [si for si, _ in bd.per_iteration],
            }
            logf.write(json.dumps(rec) + "\n")
            if (step + 1) % 50 == 0 or step == start_step:
                log_fn(
                    f"step {step + 1}/{tc.steps} lr={lr:.2e} total={bd.total_value:.3f} "
                    f"stereo={bd.stereo:.3f} mono={bd.mono:.3f} ({(time.time() - t_start):.0f}s)"
                )
            if eval_dataset is not None and (step + 1) % tc.eval_every == 0:
                eval_epe = _quick_epe(model, eval_dataset, tc.eval_samples, rng)
                logf.write(json.dumps({"step": step, "eval_epe": eval_epe}) + "\n")
                log_fn(f"  eval EPE @ step {step + 1}: {eval_epe:.3f}")
            if (step + 1) % tc.checkpoint_every == 0 or step == tc.steps - 1:
                save_checkpoint(ckpt_path, model, optimizer, step + 1, tc, rng)
                last_good = ckpt_path
    if last_good is None:
        save_checkpoint(ckpt_path, model, optimizer, tc.steps, tc, rng)
    return TrainResult(checkpoint=ckpt_path, log_path=log_path, final_loss=bd.total_value, steps_run=tc.steps - start_step, eval_epe=eval_epe)


# -- evaluation ---------------------------------------------------------------


def _region_masks(sample: StereoSample, regions):
    out = {}
    for r in regions:
        if r == "all":
            out[r] = sample.aux.get("inframe", np.isfinite(sample.disparity_gt) & (sample.disparity_gt >= 0))
        elif r == "noc":
            out[r] = sample.valid_mask
        elif r in sample.aux:
            out[r] = sample.valid_mask & sample.aux[r]
        else:
            continue
    return out


def evaluate(model: DualDepthModel, dataset, regions=("all", "noc"), out_dir=None, max_samples=None, save_vis=0, log_fn=print):
    """Per-sample and aggregate reports for both branches.

    The stereo branch is scored directly; the monocular branch is scored
    after least-squares scale-shift alignment to the ground truth (never
    raw). Returns {"stereo": [...], "mono": [...]} report lists, each
    ending with the aggregate row per region.
    """
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    stereo_rows: dict[str, list] = {r: [] for r in regions}
    mono_rows: dict[str, list] = {r: [] for r in regions}
    for i in range(n):
        s = dataset[i]
        res = model.infer(s.left[None], s.right[None])
        disp = res.disparity[0]
        mono = res.relative_depth[0]
        masks = _region_masks(s, regions)
        align_mask = s.valid_mask & (s.disparity_gt > 0)
        try:
            _, _, mono_aligned = evalkit.align_scale_shift(mono, s.disparity_gt, align_mask)
        except evalkit.DegenerateInputError:
            mono_aligned = None  # constant prediction; skip this sample's mono rows
        for r, mask in masks.items():
            if mask.sum() == 0:
                continue
            rep = evalkit.compute_disparity_metrics(disp, s.disparity_gt, mask, region=r, sample_id=f"{i:04d}")
            depth_mask = mask & (s.disparity_gt > 0)
            if depth_mask.sum() > 0:
                rep.abs_rel, rep.delta_125 = evalkit.compute_depth_metrics(np.maximum(disp, 1e-6), s.disparity_gt, depth_mask)
            stereo_rows[r].append(rep)
            if mono_aligned is None:
                continue
            mrep = evalkit.compute_disparity_metrics(mono_aligned, s.disparity_gt, mask, region=r, sample_id=f"{i:04d}")
            if depth_mask.sum() > 0:
                mrep.abs_rel, mrep.delta_125 = evalkit.compute_depth_metrics(
                    np.maximum(mono_aligned, 1e-6), s.disparity_gt, depth_mask
                )
            mono_rows[r].append(mrep)
        if out_dir is not None and i < save_vis:
            evalkit.save_comparison_png(disp, s.disparity_gt, s.valid_mask, os.path.join(out_dir, f"vis_{i:04d}_stereo.png"))
            evalkit.save_comparison_png(mono_aligned, s.disparity_gt, s.valid_mask, os.path.join(out_dir, f"vis_{i:04d}_mono.png"))

    result = {"stereo": [], "mono": []}
    for branch, rows in (("stereo", stereo_rows), ("mono", mono_rows)):
        for r in regions:
            if rows[r]:
                agg = evalkit.aggregate_reports(rows[r], region=r)
                result[branch].extend(rows[r] + [agg])
    if out_dir is not None:
        for branch in ("stereo", "mono"):
            evalkit.emit_report(result[branch], "csv", os.path.join(out_dir, f"report_{branch}.csv"))
            evalkit.emit_report(result[branch], "text", os.path.join(out_dir, f"report_{branch}.txt"))
        log_fn(f"reports written to {out_dir}")
    return result


# -- inference ----------------------------------------------------------------


def pad_to_multiple(img: np.ndarray, mult: int = 8):
    h, w = img.shape[:2]
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph or pw:
        spec = ((0, ph), (0, pw)) + ((0, 0),) * (img.ndim - 2)
        img = np.pad(img, spec, mode="edge")
    return img, (h, w)


def infer_pair(model: DualDepthModel, left: np.ndarray, right: np.ndarray):
    """Pad to a multiple of 8, run the model, crop back. Returns
    (disparity, relative_depth, forward_seconds)."""
    if left.shape != right.shape:
        raise ConfigError(f"left {left.shape} and right {right.shape} sizes differ")
    lp, (h, w) = pad_to_multiple(left)
    rp, _ = pad_to_multiple(right)
    t0 = time.time()
    res = model.infer(lp[None], rp[None])
    dt = time.time() - t0
    return res.disparity[0, :h, :w], res.relative_depth[0, :h, :w], dt


def infer_files(model: DualDepthModel, left_path, right_path, out_dir, log_fn=print):
    out = resolve_out_dir(out_dir, "infer_out")
    left = formats.load_image_png(left_path)
    right = formats.load_image_png(right_path)
    disp, mono, dt = infer_pair(model, left, right)
    formats.write_pfm(disp, os.path.join(out, "disparity.pfm"))
    formats.write_pfm(mono, os.path.join(out, "relative_depth.pfm"))
    _save_map_vis(disp, os.path.join(out, "disparity_vis.png"))
    _save_map_vis(mono, os.path.join(out, "relative_depth_vis.png"))
    log_fn(f"forward time: {dt:.3f}s; outputs in {out}")
    return out, dt


def _save_map_vis(m: np.ndarray, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(m, cmap="turbo")
    ax.axis("off")
    fig.colorbar(im, ax=ax, fraction=0.04)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
