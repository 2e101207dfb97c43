"""Attention blocks: scaled-dot attention, multi-head self-attention,
the temporal context aggregation (TCA) block with its learnable distance
kernel, global/local multi-head attention (half the heads banded), and a
pre-norm transformer encoder block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Tensor
from .errors import ConfigError, DimensionError

MASK_FILL = -1e9  # finite stand-in for -inf; exp() underflows it to exactly 0

# context-injection maps (attention output projections, the TCA output
# map) start small so every block is near-identity at init: softmax
# attention with fresh weights is close to a uniform time-average, and
# letting that dominate erases the per-snippet structure that
# frame-level scoring needs
CONTEXT_INIT_SCALE = 0.1


def band_keep_matrix(t: int, radius: int, dtype=np.float32) -> np.ndarray | None:
    """0/1 keep-matrix for |i-j| <= radius, or None when the band covers
    everything (so callers can skip masking entirely)."""
    if radius >= t - 1:
        return None
    idx = np.arange(t)
    return (np.abs(idx[:, None] - idx[None, :]) <= radius).astype(dtype)


def _apply_mask(logits: Tensor, keep: np.ndarray) -> Tensor:
    return ad.add(ad.mul(logits, keep), (1.0 - keep) * MASK_FILL)


def attention(q: Tensor, k: Tensor, v: Tensor, keep: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v, optionally banded by a keep-matrix."""
    if q.shape[1] == 0:
        raise DimensionError("attention requires d_k >= 1")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}")
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    if keep is not None:
        logits = _apply_mask(logits, keep)
    return ad.matmul(ad.softmax_rows(logits), v)


@dataclass
class HeadParams:
    q: Linear
    k: Linear
    v: Linear

    def named(self, prefix):
        yield from self.q.named(f"{prefix}.q")
        yield from self.k.named(f"{prefix}.k")
        yield from self.v.named(f"{prefix}.v")


@dataclass
class MultiHeadParams:
    """Per-head projections plus the shared output projection."""

    heads: list[HeadParams]
    out: Linear

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, dtype=np.float32) -> "MultiHeadParams":
        if n_heads < 1 or d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} must divide into {n_heads} heads")
        d_head = d_model // n_heads
        heads = [HeadParams(Linear.init(rng, d_model, d_head, dtype),
                            Linear.init(rng, d_model, d_head, dtype),
                            Linear.init(rng, d_model, d_head, dtype))
                 for _ in range(n_heads)]
        out = Linear.init(rng, d_model, d_model, dtype)
        out.w.data *= CONTEXT_INIT_SCALE
        return cls(heads=heads, out=out)

    def named(self, prefix):
        for i, h in enumerate(self.heads):
            yield from h.named(f"{prefix}.head{i}")
        yield from self.out.named(f"{prefix}.out")


def multi_head(x: Tensor, p: MultiHeadParams,
               keeps: list[np.ndarray | None] | None = None) -> Tensor:
    """Concatenated per-head attention projected by the output map.
    ``keeps`` optionally masks each head (None entry = global)."""
    if keeps is not None and len(keeps) != len(p.heads):
        raise ConfigError("one keep-matrix per head required")
    outs = []
    for i, h in enumerate(p.heads):
        keep = keeps[i] if keeps is not None else None
        outs.append(attention(h.q(x), h.k(x), h.v(x), keep=keep))
    return p.out(ad.concat(outs, axis=1))


def gl_mhsa_forward(x: Tensor, p: MultiHeadParams, radius: int) -> Tensor:
    """Multi-head attention where the first half of the heads attends
    globally and the second half within the |i-j| <= radius band."""
    h = len(p.heads)
    if h % 2 != 0:
        raise ConfigError(f"global/local attention needs an even head count, got {h}")
    keep = band_keep_matrix(x.shape[0], radius, dtype=x.data.dtype)
    keeps = [None] * (h // 2) + [keep] * (h // 2)
    return multi_head(x, p, keeps=keeps)


@dataclass
class TransformerBlockParams:
    mhsa: MultiHeadParams
    ffn_in: Linear
    ffn_out: Linear
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, rng, d_model: int, n_heads: int, ffn_mult: int = 4,
             dtype=np.float32) -> "TransformerBlockParams":
        d_ff = ffn_mult * d_model
        ones = lambda: Tensor(np.ones(d_model, dtype=dtype), requires_grad=True)
        zeros = lambda: Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True)
        return cls(mhsa=MultiHeadParams.init(rng, d_model, n_heads, dtype),
                   ffn_in=Linear.init(rng, d_model, d_ff, dtype),
                   ffn_out=Linear.init(rng, d_ff, d_model, dtype),
                   ln1_gain=ones(), ln1_bias=zeros(),
                   ln2_gain=ones(), ln2_bias=zeros())

    def named(self, prefix):
        yield from self.mhsa.named(f"{prefix}.mhsa")
        yield from self.ffn_in.named(f"{prefix}.ffn_in")
        yield from self.ffn_out.named(f"{prefix}.ffn_out")
        yield f"{prefix}.ln1_gain", self.ln1_gain
        yield f"{prefix}.ln1_bias", self.ln1_bias
        yield f"{prefix}.ln2_gain", self.ln2_gain
        yield f"{prefix}.ln2_bias", self.ln2_bias


def transformer_block(x: Tensor, p: TransformerBlockParams) -> Tensor:
    """Pre-norm wiring: x + MHSA(LN(x)), then + FFN(LN(.)) with a ReLU
    feed-forward."""
    attended = multi_head(ad.layer_norm(x, p.ln1_gain, p.ln1_bias), p.mhsa)
    y = ad.add(x, attended)
    hidden = ad.relu(p.ffn_in(ad.layer_norm(y, p.ln2_gain, p.ln2_bias)))
    return ad.add(y, p.ffn_out(hidden))


# ----------------------------------------------------------------------
# temporal context aggregation
# ----------------------------------------------------------------------

@dataclass
class TcaParams:
    """Query/key/value/output maps, the distance-kernel scalars, the
    learnable global/local mixing scalar, and the output layer norm."""

    f_q: Linear
    f_k: Linear
    f_v: Linear
    f_h: Linear
    gamma: Tensor
    beta: Tensor
    alpha_raw: Tensor  # mixing weight = sigmoid(alpha_raw)
    ln_gain: Tensor
    ln_bias: Tensor
    radius: int

    @classmethod
    def init(cls, rng, d_model: int, radius: int = 8, dtype=np.float32) -> "TcaParams":
        scalar = lambda v: Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
        f_h = Linear.init(rng, d_model, d_model, dtype)
        f_h.w.data *= CONTEXT_INIT_SCALE
        return cls(f_q=Linear.init(rng, d_model, d_model, dtype),
                   f_k=Linear.init(rng, d_model, d_model, dtype),
                   f_v=Linear.init(rng, d_model, d_model, dtype),
                   f_h=f_h,
                   gamma=scalar(1.0), beta=scalar(0.0), alpha_raw=scalar(0.0),
                   ln_gain=Tensor(np.ones(d_model, dtype=dtype), requires_grad=True),
                   ln_bias=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
                   radius=radius)

    def named(self, prefix):
        yield from self.f_q.named(f"{prefix}.f_q")
        yield from self.f_k.named(f"{prefix}.f_k")
        yield from self.f_v.named(f"{prefix}.f_v")
        yield from self.f_h.named(f"{prefix}.f_h")
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta
        yield f"{prefix}.alpha_raw", self.alpha_raw
        yield f"{prefix}.ln_gain", self.ln_gain
        yield f"{prefix}.ln_bias", self.ln_bias


def dpe_matrix(t: int, gamma: Tensor, beta: Tensor) -> Tensor:
    """Distance kernel G[i,j] = exp(-|gamma (i-j)^2 + beta|): symmetric,
    entries in (0, 1], differentiable in both scalars."""
    idx = np.arange(t, dtype=gamma.data.dtype)
    sq = (idx[:, None] - idx[None, :]) ** 2
    return ad.exp(ad.neg(ad.absolute(ad.add(ad.mul(gamma, sq), beta))))


def tca_forward(x: Tensor, p: TcaParams) -> Tensor:
    """Global branch + distance-weighted banded local branch, mixed by a
    sigmoid scalar, then residual layer norm.

    Local logits are the similarity matrix multiplied elementwise by the
    distance kernel, with entries beyond the band radius masked out.
    Zeroing the output map leaves LN(x) exactly (residual integrity).
    """
    t, d = x.shape
    sim = ad.matmul(p.f_q(x), ad.transpose(p.f_k(x)))
    values = p.f_v(x)
    scale = 1.0 / math.sqrt(d)

    a_global = ad.softmax_rows(ad.mul(sim, scale))
    x_global = ad.matmul(a_global, values)

    local_logits = ad.mul(sim, dpe_matrix(t, p.gamma, p.beta))
    keep = band_keep_matrix(t, p.radius, dtype=x.data.dtype)
    if keep is not None:
        local_logits = _apply_mask(local_logits, keep)
    a_local = ad.softmax_rows(ad.mul(local_logits, scale))
    x_local = ad.matmul(a_local, values)

    alpha = ad.sigmoid(p.alpha_raw)
    mixed = ad.add(ad.mul(alpha, x_global), ad.mul(ad.add(ad.neg(alpha), 1.0), x_local))
    return ad.layer_norm(ad.add(x, p.f_h(ad.l2_normalize_rows(mixed))),
                         p.ln_gain, p.ln_bias)
