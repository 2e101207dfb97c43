"""Dual learnable memory banks with sigmoid-similarity reads, the
four-term BCE memory loss, and the Gaussian uncertainty encoder applied
to the attended features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import MultiHeadParams, gl_mhsa_forward
from .autodiff import Linear, Tensor
from .errors import ContractError, DimensionError

SCORE_CLAMP = 1e-7
MEMORY_SLOTS = 60
SLOT_INIT_STD = 0.02  # keeps initial sigmoid similarities unsaturated


def default_top_k(t: int) -> int:
    """Shared top-k rule tied to sequence length: max(1, ceil(T/16)+1)."""
    return max(1, math.ceil(t / 16) + 1)


@dataclass
class MemoryBank:
    """Learnable slot matrix (K_m, D); kind is 'normal' or 'abnormal'."""

    slots: Tensor
    kind: str

    @classmethod
    def init(cls, rng, n_slots: int, dim: int, kind: str, dtype=np.float32) -> "MemoryBank":
        if n_slots < 1:
            raise ContractError("memory bank needs at least one slot")
        data = rng.normal(0.0, SLOT_INIT_STD, size=(n_slots, dim)).astype(dtype)
        return cls(slots=Tensor(data, requires_grad=True), kind=kind)

    def named(self, prefix):
        yield f"{prefix}.slots", self.slots


def memory_read(x: Tensor, bank: MemoryBank) -> tuple[Tensor, Tensor]:
    """Similarities S = sigmoid(x slots^T / sqrt(D)) and the augmented
    read S slots."""
    d = x.shape[1]
    if d != bank.slots.shape[1]:
        raise DimensionError(
            f"feature dim {d} does not match bank slot dim {bank.slots.shape[1]}")
    sims = ad.sigmoid(ad.mul(ad.matmul(x, ad.transpose(bank.slots)), 1.0 / math.sqrt(d)))
    return sims, ad.matmul(sims, bank.slots)


# ----------------------------------------------------------------------
# dual memory loss
# ----------------------------------------------------------------------

@dataclass
class DualMemoryScores:
    """Similarity matrices grouped by video label and bank: s_nn/s_na
    hold normal videos' scores against the normal/abnormal bank, s_an
    and s_aa the abnormal videos'.  One (T, K_m) tensor per video."""

    s_nn: list[Tensor] = field(default_factory=list)
    s_na: list[Tensor] = field(default_factory=list)
    s_an: list[Tensor] = field(default_factory=list)
    s_aa: list[Tensor] = field(default_factory=list)


def _bce_against(x: Tensor, target: float) -> Tensor:
    p = ad.clamp(x, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    if target == 1.0:
        return ad.neg(ad.log(p).mean())
    if target == 0.0:
        return ad.neg(ad.log(ad.add(ad.neg(p), 1.0)).mean())
    raise ContractError(f"binary target expected, got {target}")


def _topk_time_means(mats: list[Tensor], top_k: int | None) -> Tensor:
    """Per video: mean over slots, then the top-k values over time,
    stacked across videos."""
    picked = []
    for s in mats:
        t = s.shape[0]
        k = default_top_k(t) if top_k is None else top_k
        if k > t:
            raise ContractError(f"top_k={k} exceeds sequence length {t}")
        per_time = ad.mean_axis(s, axis=1)
        idx = ad.top_k_indices(per_time.data, k)
        picked.append(ad.gather_rows(per_time, idx))
    return ad.concat(picked, axis=0)


def dual_memory_loss(scores: DualMemoryScores, top_k: int | None = None) -> Tensor:
    """Sum of four BCE terms: normal videos match the normal bank (1)
    and reject the abnormal bank (0) over all snippets; abnormal videos
    are reduced to top-k per-time means against each bank, target 1."""
    terms = []
    if scores.s_nn:
        terms.append(_bce_against(ad.concat(scores.s_nn, axis=0), 1.0))
    if scores.s_na:
        terms.append(_bce_against(ad.concat(scores.s_na, axis=0), 0.0))
    if scores.s_an:
        terms.append(_bce_against(_topk_time_means(scores.s_an, top_k), 1.0))
    if scores.s_aa:
        terms.append(_bce_against(_topk_time_means(scores.s_aa, top_k), 1.0))
    if not terms:
        return ad.tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# ----------------------------------------------------------------------
# uncertainty encoder
# ----------------------------------------------------------------------

@dataclass
class NulParams:
    """Mean and log-variance encoders of the Gaussian constraint."""

    mean: Linear
    logvar: Linear

    @classmethod
    def init(cls, rng, dim: int, dtype=np.float32) -> "NulParams":
        p = cls(mean=Linear.init(rng, dim, dim, dtype),
                logvar=Linear.init(rng, dim, dim, dtype))
        # start near a unit Gaussian so the KL term is small at init
        p.logvar.w.data *= 0.01
        return p

    def named(self, prefix):
        yield from self.mean.named(f"{prefix}.mean")
        yield from self.logvar.named(f"{prefix}.logvar")


def nul_forward(x: Tensor, p: NulParams, rng: np.random.Generator,
                training: bool) -> tuple[Tensor, Tensor]:
    """Reparameterized Gaussian embedding plus its KL to the unit normal.

    Training samples z = mu + sigma * eps; eval returns the mean exactly.
    KL is the closed form 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2),
    averaged over time steps.
    """
    mu = p.mean(x)
    logvar = p.logvar(x)
    if training:
        eps = rng.standard_normal(mu.shape).astype(mu.data.dtype)
        z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
    else:
        z = mu
    kl_terms = ad.add(ad.add(ad.mul(mu, mu), ad.exp(logvar)),
                      ad.add(ad.neg(logvar), -1.0))
    kl = ad.mul(ad.mean_axis(ad.sum_axis(kl_terms, axis=1), axis=0), 0.5)
    return z, kl


# ----------------------------------------------------------------------
# the full memory block
# ----------------------------------------------------------------------

@dataclass
class UrdmuParams:
    """Global/local attention, uncertainty encoder, the two banks, and
    the output projection."""

    attn: MultiHeadParams
    nul: NulParams
    normal: MemoryBank
    abnormal: MemoryBank
    out: Linear
    radius: int

    @classmethod
    def init(cls, rng, dim: int, n_heads: int, radius: int,
             n_slots: int = MEMORY_SLOTS, dtype=np.float32) -> "UrdmuParams":
        # this block has no residual of its own (the stage-2 sum provides
        # it), so its output projection also starts small
        out = Linear.init(rng, dim, dim, dtype)
        out.w.data *= 0.1
        return cls(attn=MultiHeadParams.init(rng, dim, n_heads, dtype),
                   nul=NulParams.init(rng, dim, dtype),
                   normal=MemoryBank.init(rng, n_slots, dim, "normal", dtype),
                   abnormal=MemoryBank.init(rng, n_slots, dim, "abnormal", dtype),
                   out=out,
                   radius=radius)

    def named(self, prefix):
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.nul.named(f"{prefix}.nul")
        yield from self.normal.named(f"{prefix}.mem_normal")
        yield from self.abnormal.named(f"{prefix}.mem_abnormal")
        yield from self.out.named(f"{prefix}.out")


@dataclass
class UrdmuAux:
    """Everything the training losses need from one forward pass."""

    sims_normal: Tensor
    sims_abnormal: Tensor
    kl: Tensor


def urdmu_forward(x: Tensor, p: UrdmuParams, rng: np.random.Generator,
                  training: bool, use_attention: bool = True) -> tuple[Tensor, UrdmuAux]:
    """Attend, embed through the uncertainty encoder, read both banks,
    and project z + read_normal + read_abnormal back to the model width.

    Eval mode draws nothing from the rng, so repeated calls are
    bit-identical.
    """
    h = gl_mhsa_forward(x, p.attn, p.radius) if use_attention else x
    z, kl = nul_forward(h, p.nul, rng, training)
    sims_n, aug_n = memory_read(z, p.normal)
    sims_a, aug_a = memory_read(z, p.abnormal)
    features = p.out(ad.add(ad.add(z, aug_n), aug_a))
    return features, UrdmuAux(sims_normal=sims_n, sims_abnormal=sims_a, kl=kl)
