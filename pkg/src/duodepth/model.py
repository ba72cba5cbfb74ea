"""Full model assembly: backbones -> proposal -> embedding -> alignment ->
decoders, producing the per-iteration dual-output trace."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .alignment import AlignmentStack, IterationTrace
from .backbones import StereoEncoder, build_context_backbone, extract_context, extract_stereo_features
from .config import ModelConfig
from .embedding import EmbeddingVolume, HypothesisEmbedder
from .errors import ShapeError
from .proposal import DisparityPropagator, HypothesisSet, candidate_distribution, select_topk


@dataclass
class ForwardResult:
    trace: IterationTrace
    s_final: EmbeddingVolume
    m_final: ad.Tensor
    hypotheses: HypothesisSet
    prob_volume: ad.Tensor  # (N, h8, w8, D)
    logits: ad.Tensor

    @property
    def disparity(self) -> np.ndarray:
        return self.trace.disparities[-1].data

    @property
    def relative_depth(self) -> np.ndarray:
        return self.trace.relative_depths[-1].data


class DualDepthModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.store = nn.ParamStore(seed=seed, dtype=dtype)
        c = cfg.channels
        self.stereo_encoder = StereoEncoder(self.store, "stereo_encoder", c)
        self.context_net = build_context_backbone(cfg.context_backbone, self.store, "context", c)
        self.embed_coarse = HypothesisEmbedder(self.store, "embed.coarse", c, cfg.corr_groups)
        embed_fine = HypothesisEmbedder(self.store, "embed.fine", c, cfg.corr_groups)
        self.propagator = DisparityPropagator(
            self.store, "proposal.propagate", c, cfg.heads, cfg.prop_window, cfg.max_disparity
        )
        self.stack = AlignmentStack(self.store, cfg, embed_fine)

    @property
    def dtype(self):
        return self.store.dtype

    def _as_input(self, img) -> ad.Tensor:
        arr = img.data if isinstance(img, ad.Tensor) else np.asarray(img)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ShapeError(f"expected (N, H, W, 3) image, got {arr.shape}")
        return ad.Tensor(np.ascontiguousarray(arr, dtype=self.dtype))

    def forward(self, left, right, propagate: bool = True) -> ForwardResult:
        cfg = self.cfg
        left_t, right_t = self._as_input(left), self._as_input(right)
        if left_t.shape != right_t.shape:
            raise ShapeError(f"view shapes differ: {left_t.shape} vs {right_t.shape}")

        pyr1, pyr2 = extract_stereo_features(self.stereo_encoder, left_t, right_t)
        m0 = extract_context(self.context_net, left_t, cfg.channels)

        pvol, logits = candidate_distribution(pyr1.f8, pyr2.f8, cfg.candidates)
        hyp = select_topk(pvol, cfg.hypotheses, stride=8)
        if propagate:
            hyp = self.propagator(hyp, pyr1.f8)

        s0 = self.embed_coarse(pyr1.f8, pyr2.f8, hyp.d, stride=8, stage="coarse")
        trace, s_final, m_final = self.stack.run_alignment(
            s0,
            m0,
            pyr1.f4,
            pyr2.f4,
            readout_on=cfg.monocular_readout,
            update_on=cfg.monocular_update,
        )
        return ForwardResult(
            trace=trace,
            s_final=s_final,
            m_final=m_final,
            hypotheses=hyp,
            prob_volume=pvol,
            logits=logits,
        )

    def infer(self, left, right) -> ForwardResult:
        with ad.no_grad():
            return self.forward(left, right)
