"""Dual-loss supervision: weighted L1 disparity loss over all iterations and
an exponentially weighted affine-invariant loss for the monocular stream."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingAbort

MAD_FLOOR = 1e-6


@dataclass
class LossBreakdown:
    stereo: float
    mono: float
    proposal: float | None
    total_value: float
    total: ad.Tensor
    per_iteration: list = field(default_factory=list)  # (stereo_i, mono_i) floats
    flags: list = field(default_factory=list)


def iteration_weights(n_iters: int, gamma: float) -> list[float]:
    """Weight of iteration i is gamma^(n - i): late iterations weigh most."""
    return [gamma ** (n_iters - i) for i in range(n_iters)]


def _masked_mean_abs(diff: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    maskf = mask.astype(diff.dtype)
    return (ad.tabs(diff) * ad.Tensor(maskf)).sum() / float(mask.sum())


def stereo_loss(trace_disps, d_gt, valid_mask, weights) -> tuple[ad.Tensor, list, list]:
    """Sum_i w_i * mean_{valid} |d_i - d_gt|. Returns (loss, per_iter, flags)."""
    if len(weights) != len(trace_disps):
        raise ConfigError(f"{len(weights)} weights for {len(trace_disps)} iterations")
    flags = []
    n_valid = int(np.asarray(valid_mask).sum())
    if n_valid == 0:
        flags.append("stereo_loss: all-invalid mask, contributing zero")
        dtype = trace_disps[0].dtype
        return ad.Tensor(np.zeros((), dtype=dtype)), [0.0] * len(weights), flags
    gt = ad.Tensor(np.asarray(d_gt, dtype=trace_disps[0].dtype))
    total = None
    per_iter = []
    for w, d in zip(weights, trace_disps):
        term = _masked_mean_abs(d - gt, valid_mask)
        per_iter.append(term.item())
        total = term * w if total is None else total + term * w
    return total, per_iter, flags


def normalize_map(x: ad.Tensor, mask: np.ndarray) -> tuple[ad.Tensor, list]:
    """MiDaS-style scale/shift normalization of a batch of maps.

    x: (N, H, W); per sample, subtract the masked median and divide by the
    masked mean absolute deviation (floored at MAD_FLOOR).
    """
    n = x.shape[0]
    flat = x.reshape(n, -1)
    m = mask.reshape(n, -1)
    med = ad.masked_median(flat, m).reshape(n, 1)
    dev = ad.tabs(flat - med)
    counts = m.sum(axis=1).astype(flat.dtype)
    mad = (dev * ad.Tensor(m.astype(flat.dtype))).sum(axis=1) / ad.Tensor(counts)
    flags = []
    if np.any(mad.data < MAD_FLOOR):
        flags.append("normalize_map: near-constant map, deviation floored")
    mad = ad.maximum_s(mad, MAD_FLOOR).reshape(n, 1)
    return ((flat - med) / mad).reshape(x.shape), flags


def _normalize_const(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Same normalization for a constant (ground-truth) map, plain numpy."""
    n = x.shape[0]
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(n):
        v = x[i][mask[i]]
        med = np.sort(v, kind="stable")[(v.size - 1) // 2]
        mad = max(np.abs(v - med).mean(), MAD_FLOOR)
        out[i] = (x[i] - med) / mad
    return out


def affine_invariant_loss(m: ad.Tensor, d_gt: np.ndarray, valid_mask: np.ndarray) -> tuple[ad.Tensor, list]:
    """rho(m, d): mean |m_hat - d_hat| over valid pixels, both maps normalized
    independently by masked median / mean absolute deviation."""
    mhat, flags = normalize_map(m, valid_mask)
    ghat = _normalize_const(np.asarray(d_gt, dtype=np.float64), valid_mask).astype(m.dtype)
    diff = mhat - ad.Tensor(ghat)
    return _masked_mean_abs(diff, valid_mask), flags


def mono_loss(trace_monos, d_gt, valid_mask, gamma=0.8) -> tuple[ad.Tensor, list, list]:
    """Sum_i gamma^(n-i) * rho(m_i, d_gt). Returns (loss, per_iter, flags)."""
    flags = []
    if int(np.asarray(valid_mask).sum()) == 0:
        flags.append("mono_loss: all-invalid mask, contributing zero")
        dtype = trace_monos[0].dtype
        return ad.Tensor(np.zeros((), dtype=dtype)), [0.0] * len(trace_monos), flags
    weights = iteration_weights(len(trace_monos), gamma)
    total = None
    per_iter = []
    for w, m in zip(weights, trace_monos):
        rho, f = affine_invariant_loss(m, d_gt, valid_mask)
        flags.extend(f)
        per_iter.append(rho.item())
        total = rho * w if total is None else total + rho * w
    return total, per_iter, flags


def proposal_loss(log_probs: ad.Tensor, target_bins: np.ndarray, valid8: np.ndarray) -> ad.Tensor:
    """Cross-entropy supervising the candidate distribution at stride 8.

    log_probs: (N, h, w, D) log-softmax outputs; target_bins: int candidate
    indices; valid8: bool mask of coarse cells with usable ground truth.
    """
    n_valid = int(valid8.sum())
    if n_valid == 0:
        return ad.Tensor(np.zeros((), dtype=log_probs.dtype))
    picked = ad.gather_last(log_probs, target_bins[..., None])[..., 0]
    maskf = valid8.astype(log_probs.dtype)
    return -(picked * ad.Tensor(maskf)).sum() / float(n_valid)


def hypothesis_score_loss(hyp_d: ad.Tensor, hyp_score: ad.Tensor, d_gt8: np.ndarray, valid8: np.ndarray) -> ad.Tensor:
    """Cross-entropy over the K propagated hypothesis scores, targeting the
    slot closest to ground truth; trains the re-scoring head, whose output
    otherwise only drives (non-differentiable) slot ordering."""
    n_valid = int(valid8.sum())
    if n_valid == 0:
        return ad.Tensor(np.zeros((), dtype=hyp_score.dtype))
    target = np.argmin(np.abs(hyp_d.data - d_gt8[..., None]), axis=-1)
    picked = ad.gather_last(ad.tlog(hyp_score + 1e-12), target[..., None])[..., 0]
    maskf = valid8.astype(hyp_score.dtype)
    return -(picked * ad.Tensor(maskf)).sum() / float(n_valid)


def total_loss(
    trace_disps,
    trace_monos,
    d_gt,
    valid_mask,
    gamma=0.8,
    lam_mono=1.0,
    lam_prop=1.0,
    prop_log_probs=None,
    prop_targets=None,
    prop_valid=None,
    hyp=None,
    d_gt8=None,
) -> LossBreakdown:
    """Combine the loss components; abort on non-finite values."""
    n = len(trace_disps)
    weights = iteration_weights(n, gamma)
    s_loss, s_iter, flags = stereo_loss(trace_disps, d_gt, valid_mask, weights)
    _check_finite("stereo", s_loss.item())
    total = s_loss
    m_iter = [0.0] * n
    m_val = 0.0
    if lam_mono != 0.0:
        m_loss, m_iter, mf = mono_loss(trace_monos, d_gt, valid_mask, gamma)
        flags += mf
        m_val = m_loss.item()
        _check_finite("mono", m_val)
        total = total + m_loss * lam_mono
    p_val = None
    if lam_prop != 0.0 and prop_log_probs is not None:
        p_loss = proposal_loss(prop_log_probs, prop_targets, prop_valid)
        if hyp is not None and d_gt8 is not None:
            p_loss = p_loss + hypothesis_score_loss(hyp.d, hyp.score, d_gt8, prop_valid)
        p_val = p_loss.item()
        _check_finite("proposal", p_val)
        total = total + p_loss * lam_prop
    tv = total.item()
    _check_finite("total", tv)
    return LossBreakdown(
        stereo=s_loss.item(),
        mono=m_val,
        proposal=p_val,
        total_value=tv,
        total=total,
        per_iteration=list(zip(s_iter, m_iter)),
        flags=flags,
    )


def _check_finite(name: str, value: float) -> None:
    if not np.isfinite(value):
        raise TrainingAbort(name, value)
