"""Coarse-to-fine segmentation decoder and the full-model forward pass.

The adaptive classifier scores each patch (inner product, sigmoid), the
scores gate the patch features, and ``log2(patch_size)`` blocks of
{2x bilinear upsample, channel-halving linear, GELU} lift the gated patch
grid to pixel logits. The final linear produces one logit per pixel; no
activation follows it. Upsampling is bilinear rather than nearest: nearest
replication keeps every pixel of a patch identical through the pointwise
layers, which caps mask quality at patch granularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .encoders import (LanguageParams, ModelConfig, VisionParams, init_language,
                       init_vision, language_encode, vision_encode)
from .fusion import FusionParams, fuse, init_fusion, project
from .transformer import ConfigError, _weight, _zeros


@dataclass
class PredictionPair:
    """Patch-level probabilities and pixel-level logits from one forward pass.

    ``pixel_logits`` is None only when the decoder was explicitly skipped
    (decoder-ablation runs)."""

    patch_probs: Tensor  # (n_patches, 1), strictly inside (0, 1)
    pixel_logits: Tensor | None  # (H, W, 1), unbounded


@dataclass
class DecoderParams:
    blocks: list[tuple[Tensor, Tensor]]  # per block: channel-halving (w, b)
    w_final: Tensor
    b_final: Tensor

    def named_parameters(self):
        out = []
        for i, (w, b) in enumerate(self.blocks):
            out.append((f"blocks.{i}.w", w, True))
            out.append((f"blocks.{i}.b", b, False))
        out.append(("final.w", self.w_final, True))
        out.append(("final.b", self.b_final, False))
        return out


def decoder_channel_chain(cfg: ModelConfig) -> list[int]:
    """Channel widths entering each block: 2D, D, D/2, ... down to 2D/2^K."""
    chain = [2 * cfg.dim_fusion]
    for _ in range(cfg.decoder_blocks):
        chain.append(chain[-1] // 2)
    return chain


def init_decoder(rng: np.random.Generator, cfg: ModelConfig) -> DecoderParams:
    chain = decoder_channel_chain(cfg)
    blocks = [(_weight(rng, (c_in, c_in // 2)), _zeros((1, c_in // 2)))
              for c_in in chain[:-1]]
    return DecoderParams(blocks=blocks,
                         w_final=_weight(rng, (chain[-1], 1)),
                         b_final=_zeros((1, 1)))


def patch_predict(z_v: Tensor, e_s: Tensor) -> Tensor:
    """Sigmoid of the classifier inner product, normalized by sqrt(D)."""
    if z_v.shape[1] != e_s.shape[1]:
        raise ConfigError(f"feature width {z_v.shape} vs classifier {e_s.shape}")
    d = z_v.shape[1]
    return T.sigmoid(T.scale(T.matmul(z_v, T.transpose(e_s)), 1.0 / math.sqrt(d)))


def mask_features(z_v: Tensor, patch_probs: Tensor) -> Tensor:
    """Scale each patch feature row by its predicted probability."""
    if patch_probs.shape != (z_v.shape[0], 1):
        raise ConfigError(f"mask shape {patch_probs.shape} does not match {z_v.shape}")
    return T.hadamard(z_v, patch_probs)


def decode_pixels(z_v: Tensor, z_masked: Tensor, params: DecoderParams,
                  cfg: ModelConfig) -> Tensor:
    """(n_patches, D) x 2 -> (H, W, 1) logits via K upsample/halve/GELU blocks."""
    if len(params.blocks) != cfg.decoder_blocks:
        raise ConfigError(f"decoder has {len(params.blocks)} blocks, "
                          f"config needs {cfg.decoder_blocks}")
    gh, gw = cfg.patch_grid
    x = T.concat([z_v, z_masked], axis=1)
    grid = T.reshape(x, (gh, gw, 2 * cfg.dim_fusion))
    for w, b in params.blocks:
        grid = T.upsample2x_bilinear(grid)
        h, ww, c = grid.shape
        flat = T.reshape(grid, (h * ww, c))
        flat = T.gelu(T.matmul(flat, w) + b)
        grid = T.reshape(flat, (h, ww, c // 2))
    h, ww, c = grid.shape
    logits = T.matmul(T.reshape(grid, (h * ww, c)), params.w_final) + params.b_final
    return T.reshape(logits, (cfg.image_h, cfg.image_w, 1))


@dataclass
class RestrParams:
    """Every trainable parameter of the network, grouped by stage."""

    vision: VisionParams
    language: LanguageParams
    fusion: FusionParams
    decoder: DecoderParams

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        out = []
        for prefix, group in (("vision", self.vision), ("language", self.language),
                              ("fusion", self.fusion), ("decoder", self.decoder)):
            out.extend((f"{prefix}.{n}", t, d) for n, t, d in group.named_parameters())
        return out


def init_model(rng: np.random.Generator, cfg: ModelConfig) -> RestrParams:
    return RestrParams(vision=init_vision(rng, cfg),
                       language=init_language(rng, cfg),
                       fusion=init_fusion(rng, cfg),
                       decoder=init_decoder(rng, cfg))


def forward(image: np.ndarray, token_ids: Sequence[int], params: RestrParams,
            cfg: ModelConfig, sink_a: list | None = None,
            sink_b: list | None = None, with_pixels: bool = True) -> PredictionPair:
    """Full pipeline: encode both modalities, fuse, classify patches, decode."""
    z_v = vision_encode(image, params.vision, cfg)
    z_l = language_encode(token_ids, params.language, cfg)
    pv, pl = project(z_v, z_l, params.fusion)
    z_v_fused, e_s = fuse(pv, pl, params.fusion, sink_a, sink_b)
    patch_probs = patch_predict(z_v_fused, e_s)
    if not with_pixels:
        return PredictionPair(patch_probs=patch_probs, pixel_logits=None)
    masked = mask_features(z_v_fused, patch_probs)
    pixel_logits = decode_pixels(pv, masked, params.decoder, cfg)
    return PredictionPair(patch_probs=patch_probs, pixel_logits=pixel_logits)
