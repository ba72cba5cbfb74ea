"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import ParamStore


class AdamW:
    """Decoupled weight decay Adam over a ParamStore."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), weight_decay=1e-4, eps=1e-8):
        self.store = store
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.named()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.named()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in self.store.named():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.wd * p.data)

    def state_dict(self) -> dict:
        out = {"t": self.t}
        out["m"] = {k: a.copy() for k, a in self.m.items()}
        out["v"] = {k: a.copy() for k, a in self.v.items()}
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k]).copy()
            self.v[k] = np.asarray(state["v"][k]).copy()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in store.named():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for _, p in store.named():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class OneCycleSchedule:
    """Linear warmup to the peak followed by cosine decay.

    lr(0) = peak / start_div, the maximum equals peak exactly at the end of
    warmup, and lr at the last step is peak / final_div.
    """

    def __init__(self, peak_lr: float, total_steps: int, warmup_frac=0.05, start_div=25.0, final_div=1e4):
        self.peak = peak_lr
        self.total = max(int(total_steps), 1)
        self.warmup_steps = max(int(round(warmup_frac * self.total)), 1)
        if self.warmup_steps >= self.total:
            self.warmup_steps = max(self.total - 1, 1)
        self.start = peak_lr / start_div
        self.final = peak_lr / final_div

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total - 1)
        if step <= self.warmup_steps:
            f = step / self.warmup_steps
            return self.start + f * (self.peak - self.start)
        span = max(self.total - 1 - self.warmup_steps, 1)
        f = (step - self.warmup_steps) / span
        return self.final + 0.5 * (self.peak - self.final) * (1.0 + math.cos(math.pi * f))
