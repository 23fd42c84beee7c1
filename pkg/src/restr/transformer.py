"""Multi-headed self-attention, the pre-norm transformer block, and stacks.

A stack is a sequence of residual blocks ``z + MSA(LN(z))`` followed by
``z + MLP(LN(z))``, closed with a terminal layer normalization. Per-head
query/key/value projections are independent linear maps; the concatenated
head outputs pass through a single output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


@dataclass
class TransformerConfig:
    """Shape of one encoder stack: depth, width, heads, MLP expansion."""

    layers: int
    dim: int
    heads: int
    mlp_hidden: int | None = None

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.dim < 1 or self.heads < 1:
            raise ConfigError(f"dim/heads must be positive, got {self.dim}/{self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw clipped to two standard deviations."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


def _weight(rng, shape) -> Tensor:
    return Tensor(trunc_normal(rng, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class HeadParams:
    """Independent q/k/v projections of one attention head."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor

    def named_parameters(self):
        return [("wq", self.wq, True), ("bq", self.bq, False),
                ("wk", self.wk, True), ("bk", self.bk, False),
                ("wv", self.wv, True), ("bv", self.bv, False)]


@dataclass
class BlockParams:
    """Parameters of one pre-norm block: MSA heads, output projection, two
    layer norms, and the two-layer MLP."""

    heads: list[HeadParams]
    w_out: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_mlp1: Tensor
    b_mlp1: Tensor
    w_mlp2: Tensor
    b_mlp2: Tensor

    def named_parameters(self):
        out = []
        for i, h in enumerate(self.heads):
            out.extend((f"heads.{i}.{n}", t, d) for n, t, d in h.named_parameters())
        out.extend([
            ("w_out", self.w_out, True),
            ("ln1.gain", self.ln1_gain, False), ("ln1.bias", self.ln1_bias, False),
            ("ln2.gain", self.ln2_gain, False), ("ln2.bias", self.ln2_bias, False),
            ("mlp.w1", self.w_mlp1, True), ("mlp.b1", self.b_mlp1, False),
            ("mlp.w2", self.w_mlp2, True), ("mlp.b2", self.b_mlp2, False),
        ])
        return out


@dataclass
class StackParams:
    """An encoder stack; repeated block references realize weight sharing."""

    blocks: list[BlockParams]
    ln_f_gain: Tensor
    ln_f_bias: Tensor

    def named_parameters(self):
        out, seen = [], set()
        for i, blk in enumerate(self.blocks):
            for name, t, decay in blk.named_parameters():
                if id(t) in seen:
                    continue
                seen.add(id(t))
                out.append((f"blocks.{i}.{name}", t, decay))
        out.append(("ln_f.gain", self.ln_f_gain, False))
        out.append(("ln_f.bias", self.ln_f_bias, False))
        return out


def init_block(rng: np.random.Generator, cfg: TransformerConfig) -> BlockParams:
    d, dh, hm = cfg.dim, cfg.head_dim, cfg.mlp_hidden
    heads = [HeadParams(wq=_weight(rng, (d, dh)), bq=_zeros((1, dh)),
                        wk=_weight(rng, (d, dh)), bk=_zeros((1, dh)),
                        wv=_weight(rng, (d, dh)), bv=_zeros((1, dh)))
             for _ in range(cfg.heads)]
    return BlockParams(
        heads=heads,
        w_out=_weight(rng, (cfg.heads * dh, d)),
        ln1_gain=_ones(d), ln1_bias=_zeros(d),
        ln2_gain=_ones(d), ln2_bias=_zeros(d),
        w_mlp1=_weight(rng, (d, hm)), b_mlp1=_zeros((1, hm)),
        w_mlp2=_weight(rng, (hm, d)), b_mlp2=_zeros((1, d)),
    )


def init_stack(rng: np.random.Generator, cfg: TransformerConfig,
               share_weights: bool = False) -> StackParams:
    if share_weights:
        blk = init_block(rng, cfg)
        blocks = [blk] * cfg.layers
    else:
        blocks = [init_block(rng, cfg) for _ in range(cfg.layers)]
    return StackParams(blocks=blocks, ln_f_gain=_ones(cfg.dim), ln_f_bias=_zeros(cfg.dim))


def self_attention(z: Tensor, head: HeadParams,
                   attn_sink: list | None = None) -> Tensor:
    """Scaled dot-product attention of one head; appends the row-stochastic
    attention matrix to ``attn_sink`` when requested."""
    q = T.matmul(z, head.wq) + head.bq
    k = T.matmul(z, head.wk) + head.bk
    v = T.matmul(z, head.wv) + head.bv
    dh = head.wq.shape[1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn.data)
    return T.matmul(attn, v)


def msa(z: Tensor, block: BlockParams, attn_sink: list | None = None) -> Tensor:
    """Multi-headed self-attention: concatenated heads, one output projection."""
    outs = [self_attention(z, h, attn_sink) for h in block.heads]
    cat = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return T.matmul(cat, block.w_out)


def transformer_block(z: Tensor, block: BlockParams,
                      attn_sink: list | None = None) -> Tensor:
    zb = msa(T.layer_norm(z, block.ln1_gain, block.ln1_bias), block, attn_sink) + z
    hidden = T.gelu(T.matmul(T.layer_norm(zb, block.ln2_gain, block.ln2_bias),
                             block.w_mlp1) + block.b_mlp1)
    return T.matmul(hidden, block.w_mlp2) + block.b_mlp2 + zb


def encoder_stack(z: Tensor, params: StackParams,
                  attn_sink: list | None = None) -> Tensor:
    """Run every block, then the terminal layer norm.

    With a sink, one list of per-head attention matrices is appended per block.
    """
    for block in params.blocks:
        block_sink: list | None = [] if attn_sink is not None else None
        z = transformer_block(z, block, block_sink)
        if attn_sink is not None:
            attn_sink.append(block_sink)
    return T.layer_norm(z, params.ln_f_gain, params.ln_f_bias)


def block_param_count(cfg: TransformerConfig) -> int:
    """Closed-form parameter count of one block (must match enumeration)."""
    d, dh, k, hm = cfg.dim, cfg.head_dim, cfg.heads, cfg.mlp_hidden
    qkv = k * 3 * (d * dh + dh)
    out_proj = k * dh * d
    norms = 4 * d
    mlp = d * hm + hm + hm * d + d
    return qkv + out_proj + norms + mlp


def stack_param_count(cfg: TransformerConfig, share_weights: bool = False) -> int:
    unique_blocks = 1 if share_weights else cfg.layers
    return unique_blocks * block_param_count(cfg) + 2 * cfg.dim


def block_mac_count(n_tokens: int, cfg: TransformerConfig) -> int:
    """Matrix-product MACs of one block forward on ``n_tokens`` tokens."""
    d, hm = cfg.dim, cfg.mlp_hidden
    qkv = 3 * n_tokens * d * d
    attn = 2 * n_tokens * n_tokens * d  # scores and value aggregation, all heads
    out_proj = n_tokens * d * d
    mlp = 2 * n_tokens * d * hm
    return qkv + attn + out_proj + mlp


def stack_mac_count(n_tokens: int, cfg: TransformerConfig) -> int:
    return cfg.layers * block_mac_count(n_tokens, cfg)


def count_parameters(named) -> int:
    """Total element count over (name, tensor, decay) triples."""
    return int(sum(t.size for _, t, _ in named))
