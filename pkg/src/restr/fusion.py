"""Multimodal fusion encoder: class seed embedding, variant topologies,
attention probing, and the params/MACs profiler.

All variants share the same two projected inputs and the same parameter
budget: two sub-encoders of ``fusion_layers/2`` blocks each.

* CME: blocks run on [visual ++ linguistic]; the seed then joins the
  visually-attended linguistic tokens in the second sub-encoder.
* IME: same visual-linguistic leg, but the seed leg sees the *raw* projected
  linguistic tokens, so the seed never interacts with visual content.
* VME: both sub-encoders run back-to-back over the joint sequence
  [visual ++ linguistic ++ seed], giving the seed direct visual access.
* CME_SHARED: CME with weights tied across the blocks of each sub-encoder.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .transformer import (ConfigError, StackParams, _weight, _zeros, _ones,
                          block_mac_count, block_param_count, encoder_stack,
                          init_stack, trunc_normal)

if TYPE_CHECKING:
    from .encoders import ModelConfig


class FusionVariant(enum.Enum):
    VME = "vme"
    IME = "ime"
    CME = "cme"
    CME_SHARED = "cme_shared"

    @classmethod
    def parse(cls, text: str) -> "FusionVariant":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown fusion variant {text!r}; expected one of "
                f"{[v.value for v in cls]}") from None


@dataclass
class FusionParams:
    """Seed embedding, per-modality projectors, and the two sub-encoders."""

    variant: FusionVariant
    seed: Tensor
    ln_v_gain: Tensor
    ln_v_bias: Tensor
    w_v: Tensor
    b_v: Tensor
    ln_l_gain: Tensor
    ln_l_bias: Tensor
    w_l: Tensor
    b_l: Tensor
    stack_a: StackParams  # visual-linguistic sub-encoder (VME: first half)
    stack_b: StackParams  # linguistic-seed sub-encoder (VME: second half)

    def named_parameters(self):
        out = [("seed", self.seed, False),
               ("proj_v.ln.gain", self.ln_v_gain, False),
               ("proj_v.ln.bias", self.ln_v_bias, False),
               ("proj_v.w", self.w_v, True), ("proj_v.b", self.b_v, False),
               ("proj_l.ln.gain", self.ln_l_gain, False),
               ("proj_l.ln.bias", self.ln_l_bias, False),
               ("proj_l.w", self.w_l, True), ("proj_l.b", self.b_l, False)]
        out.extend((f"stack_a.{n}", t, d) for n, t, d in self.stack_a.named_parameters())
        out.extend((f"stack_b.{n}", t, d) for n, t, d in self.stack_b.named_parameters())
        return out


def init_fusion(rng: np.random.Generator, cfg: "ModelConfig") -> FusionParams:
    share = cfg.fusion_variant is FusionVariant.CME_SHARED
    tfm = cfg.fusion_tfm()
    return FusionParams(
        variant=cfg.fusion_variant,
        seed=Tensor(trunc_normal(rng, (1, cfg.dim_fusion)), requires_grad=True),
        ln_v_gain=_ones(cfg.dim_vision), ln_v_bias=_zeros(cfg.dim_vision),
        w_v=_weight(rng, (cfg.dim_vision, cfg.dim_fusion)),
        b_v=_zeros((1, cfg.dim_fusion)),
        ln_l_gain=_ones(cfg.dim_language), ln_l_bias=_zeros(cfg.dim_language),
        w_l=_weight(rng, (cfg.dim_language, cfg.dim_fusion)),
        b_l=_zeros((1, cfg.dim_fusion)),
        stack_a=init_stack(rng, tfm, share_weights=share),
        stack_b=init_stack(rng, tfm, share_weights=share),
    )


def project(z_v: Tensor, z_l: Tensor, params: FusionParams) -> tuple[Tensor, Tensor]:
    """Normalize each modality and project it to the shared fusion width."""
    pv = T.matmul(T.layer_norm(z_v, params.ln_v_gain, params.ln_v_bias), params.w_v) + params.b_v
    pl = T.matmul(T.layer_norm(z_l, params.ln_l_gain, params.ln_l_bias), params.w_l) + params.b_l
    return pv, pl


def fuse_cme(z_v: Tensor, z_l: Tensor, params: FusionParams,
             sink_a: list | None = None, sink_b: list | None = None
             ) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (patch features, adaptive classifier, attended linguistic features)."""
    n_v, n_l = z_v.shape[0], z_l.shape[0]
    joint = encoder_stack(T.concat([z_v, z_l], axis=0), params.stack_a, sink_a)
    z_v_out = T.slice_axis(joint, 0, 0, n_v)
    z_l_out = T.slice_axis(joint, 0, n_v, n_v + n_l)
    seeded = encoder_stack(T.concat([z_l_out, params.seed], axis=0), params.stack_b, sink_b)
    e_s_out = T.slice_axis(seeded, 0, n_l, n_l + 1)
    return z_v_out, e_s_out, z_l_out


def fuse_vme(z_v: Tensor, z_l: Tensor, params: FusionParams,
             sink_a: list | None = None, sink_b: list | None = None
             ) -> tuple[Tensor, Tensor]:
    """All tokens run through both sub-encoders together: [z_v ++ z_l ++ seed]."""
    n_v, n_l = z_v.shape[0], z_l.shape[0]
    joint = T.concat([z_v, z_l, params.seed], axis=0)
    h = encoder_stack(joint, params.stack_a, sink_a)
    h = encoder_stack(h, params.stack_b, sink_b)
    z_v_out = T.slice_axis(h, 0, 0, n_v)
    e_s_out = T.slice_axis(h, 0, n_v + n_l, n_v + n_l + 1)
    return z_v_out, e_s_out


def fuse_ime(z_v: Tensor, z_l: Tensor, params: FusionParams,
             sink_a: list | None = None, sink_b: list | None = None
             ) -> tuple[Tensor, Tensor]:
    """Seed leg consumes the raw projected linguistic tokens: no visual path."""
    n_v, n_l = z_v.shape[0], z_l.shape[0]
    joint = encoder_stack(T.concat([z_v, z_l], axis=0), params.stack_a, sink_a)
    z_v_out = T.slice_axis(joint, 0, 0, n_v)
    seeded = encoder_stack(T.concat([z_l, params.seed], axis=0), params.stack_b, sink_b)
    e_s_out = T.slice_axis(seeded, 0, n_l, n_l + 1)
    return z_v_out, e_s_out


def fuse(z_v: Tensor, z_l: Tensor, params: FusionParams,
         sink_a: list | None = None, sink_b: list | None = None
         ) -> tuple[Tensor, Tensor]:
    """Variant-agnostic entry: always (patch features, adaptive classifier)."""
    if params.variant is FusionVariant.VME:
        return fuse_vme(z_v, z_l, params, sink_a, sink_b)
    if params.variant is FusionVariant.IME:
        return fuse_ime(z_v, z_l, params, sink_a, sink_b)
    z_v_out, e_s_out, _ = fuse_cme(z_v, z_l, params, sink_a, sink_b)
    return z_v_out, e_s_out


# ---------------------------------------------------------------------------
# attention probe
# ---------------------------------------------------------------------------

@dataclass
class LayerAttention:
    """Seed-row attention mass per fusion layer, averaged over heads/samples.

    ``a_v`` is None for layers whose sequence carries no visual tokens
    (the linguistic-seed legs of CME and IME).
    """

    layer: int
    a_v: float | None
    a_l: float
    a_self: float


@dataclass
class AttnStats:
    variant: FusionVariant
    layers: list[LayerAttention]

    def csv_rows(self) -> list[str]:
        rows = ["layer,a_v,a_l,a_self"]
        for la in self.layers:
            av = "" if la.a_v is None else f"{la.a_v:.6f}"
            rows.append(f"f{la.layer + 1},{av},{la.a_l:.6f},{la.a_self:.6f}")
        return rows

    def __str__(self) -> str:
        return "\n".join(self.csv_rows())


def _seed_row_splits(sinks: Sequence[tuple[list, int, int]]) -> list[list[np.ndarray]]:
    """Per layer, per head: (a_v-or-nan, a_l, a_self) sums of the seed row."""
    rows = []
    for sink, n_v, n_l in sinks:
        for block_heads in sink:
            per_head = []
            for attn in block_heads:
                seed = attn[n_v + n_l]
                a_v = float(seed[:n_v].sum()) if n_v else math.nan
                a_l = float(seed[n_v:n_v + n_l].sum())
                a_self = float(seed[n_v + n_l])
                per_head.append(np.array([a_v, a_l, a_self]))
            rows.append(per_head)
    return rows


def attention_probe(params, cfg: "ModelConfig",
                    samples: Iterable) -> AttnStats:
    """Measure where the class seed attends, per fusion layer.

    ``params`` is the full model parameter bundle; ``samples`` yield
    ``(image, token_ids)`` pairs (richer sample objects with ``.image`` and
    ``.token_ids`` attributes also work). Scores are softmax mass from the
    seed row, split into visual / linguistic / self segments, averaged over
    heads and samples.
    """
    from .encoders import language_encode, vision_encode  # runtime import: encoders
    # imports FusionVariant from this module, so the top level must stay one-way

    fp: FusionParams = params.fusion
    totals: list[np.ndarray] | None = None
    visual_flags: list[bool] = []
    n_samples = 0
    with T.no_grad():
        for sample in samples:
            image, ids = ((sample.image, sample.token_ids)
                          if hasattr(sample, "image") else sample)
            z_v = vision_encode(image, params.vision, cfg)
            z_l = language_encode(ids, params.language, cfg)
            pv, pl = project(z_v, z_l, fp)
            sink_a: list = []
            sink_b: list = []
            fuse(pv, pl, fp, sink_a, sink_b)
            n_v, n_l = pv.shape[0], pl.shape[0]
            if fp.variant is FusionVariant.VME:
                layer_sinks = [(sink_a, n_v, n_l), (sink_b, n_v, n_l)]
            else:
                layer_sinks = [(sink_b, 0, n_l)]
            split = _seed_row_splits(layer_sinks)
            head_means = [np.mean(np.stack(per_head), axis=0) for per_head in split]
            if totals is None:
                totals = [np.zeros(3) for _ in head_means]
                visual_flags = [not np.isnan(h[0]) for h in head_means]
            for acc, h in zip(totals, head_means):
                acc += np.nan_to_num(h)
            n_samples += 1
    if not n_samples or totals is None:
        raise ValueError("attention_probe needs at least one sample")
    layers = []
    for i, (acc, has_v) in enumerate(zip(totals, visual_flags)):
        mean = acc / n_samples
        layers.append(LayerAttention(layer=i, a_v=float(mean[0]) if has_v else None,
                                     a_l=float(mean[1]), a_self=float(mean[2])))
    return AttnStats(variant=fp.variant, layers=layers)


# ---------------------------------------------------------------------------
# profiler
# ---------------------------------------------------------------------------

@dataclass
class ProfileResult:
    variant: FusionVariant
    param_count: int
    mac_count: int

    def csv_row(self) -> str:
        return f"{self.variant.value},{self.param_count},{self.mac_count}"


def profile(variant: FusionVariant, cfg: "ModelConfig") -> ProfileResult:
    """Closed-form parameters and forward MACs of the fusion transformer blocks.

    Counts cover the two sub-encoders' blocks only: the modality projectors,
    seed, and terminal norms are identical across variants and excluded, which
    is what makes the variant totals directly comparable. MACs count every
    matrix product, attention scores and value aggregation included.
    """
    tfm = cfg.fusion_tfm()
    half = cfg.fusion_layers // 2
    unique_blocks = 2 if variant is FusionVariant.CME_SHARED else cfg.fusion_layers
    params = unique_blocks * block_param_count(tfm)

    n_v, n_l = cfg.n_patches, cfg.max_tokens
    if variant is FusionVariant.VME:
        macs = cfg.fusion_layers * block_mac_count(n_v + n_l + 1, tfm)
    else:
        macs = (half * block_mac_count(n_v + n_l, tfm)
                + half * block_mac_count(n_l + 1, tfm))
    return ProfileResult(variant=variant, param_count=params, mac_count=macs)


def profile_all(cfg: "ModelConfig") -> list[ProfileResult]:
    return [profile(v, cfg) for v in FusionVariant]
