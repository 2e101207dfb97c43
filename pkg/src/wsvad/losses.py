"""Training objectives: MIL bag loss, magnitude-contrast hinge,
distillation MSE, and the weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .memory import SCORE_CLAMP, default_top_k

MC_TOP_K = 3  # magnitude contrast compares the top-3 feature norms


@dataclass
class LossWeights:
    """Coefficients of the combined objective.

    ``lam_kd`` of None resolves to 1.0 when a teacher is configured and
    0.0 otherwise.  ``bag_topk`` of None falls back to the shared
    sequence-length rule.
    """

    lam_kd: float | None = None
    lam_mc: float = 1.0
    lam_dm: float = 1.0
    lam_kl: float = 1e-3
    mc_margin: float = 1.0
    mc_top_k: int = MC_TOP_K
    bag_topk: int | None = None

    def __post_init__(self):
        for name in ("lam_mc", "lam_dm", "lam_kl"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if self.lam_kd is not None and self.lam_kd < 0:
            raise ContractError("lam_kd must be >= 0")
        if self.mc_margin <= 0:
            raise ContractError("mc_margin must be positive")

    def resolve_kd(self, has_teacher: bool) -> float:
        if self.lam_kd is not None:
            return self.lam_kd
        return 1.0 if has_teacher else 0.0


def _bce_scalar(p: Tensor, target: int) -> Tensor:
    clamped = ad.clamp(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    if target == 1:
        return ad.neg(ad.log(clamped))
    return ad.neg(ad.log(ad.add(ad.neg(clamped), 1.0)))


def mil_bag_loss(snippet_scores: Tensor, label: int, bag_topk: int | None = None,
                 pool_idx: np.ndarray | None = None) -> Tensor:
    """BCE between the video label and the mean of the top-k snippet
    scores.  ``pool_idx`` optionally restricts the candidate snippets
    (the nominated subset during training); the top-k then applies
    within that pool."""
    t = snippet_scores.shape[0]
    if t == 0:
        raise ContractError("empty score series")
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    pool = snippet_scores
    if pool_idx is not None:
        if len(pool_idx) == 0:
            raise ContractError("empty nomination pool")
        pool = ad.gather_rows(snippet_scores, np.asarray(pool_idx, dtype=np.intp))
    n = pool.shape[0]
    k = default_top_k(t) if bag_topk is None else bag_topk
    k = min(k, n)
    if k < 1:
        raise ContractError(f"bag_topk must be >= 1, got {k}")
    idx = ad.top_k_indices(pool.data, k)
    bag_score = ad.gather_rows(pool, idx).mean()
    return _bce_scalar(bag_score, label)


def magnitude_contrast_loss(normal_feats: Tensor, abnormal_feats: Tensor,
                            k: int = MC_TOP_K, margin: float = 1.0) -> Tensor:
    """Hinge separating the mean top-k feature norms of abnormal rows
    from the normal ones: max(0, margin - (mu_abnormal - mu_normal)).
    ``k`` clamps to the smaller batch when rows are scarce."""
    if normal_feats.shape[0] == 0 or abnormal_feats.shape[0] == 0:
        raise ContractError("magnitude contrast needs both batches non-empty")
    if k < 1:
        raise ContractError("k must be >= 1")

    def top_mean(feats: Tensor) -> Tensor:
        norms = ad.row_norms(feats)
        kk = min(k, norms.shape[0])
        return ad.gather_rows(norms, ad.top_k_indices(norms.data, kk)).mean()

    gap = ad.add(top_mean(abnormal_feats), ad.neg(top_mean(normal_feats)))
    return ad.relu(ad.add(ad.neg(gap), margin))


def distill_loss(student_scores: Tensor, teacher_scores: np.ndarray | None) -> Tensor:
    """Mean squared error against a frozen teacher's score series; zero
    when no teacher is configured."""
    if teacher_scores is None:
        return ad.tensor(0.0, dtype=student_scores.data.dtype)
    teacher = np.asarray(teacher_scores, dtype=student_scores.data.dtype)
    if teacher.shape != student_scores.shape:
        raise ContractError(
            f"teacher series {teacher.shape} does not match student {student_scores.shape}")
    diff = ad.add(student_scores, -teacher)
    return ad.mul(diff, diff).mean()


def total_loss(mil: Tensor, kd: Tensor, mc: Tensor, dm: Tensor, kl: Tensor,
               weights: LossWeights, has_teacher: bool = False) -> tuple[Tensor, dict]:
    """L = mil + lam_kd*kd + lam_mc*mc + lam_dm*dm + lam_kl*kl, plus a
    float snapshot of every part for logging."""
    lam_kd = weights.resolve_kd(has_teacher)
    total = mil
    for lam, term in ((lam_kd, kd), (weights.lam_mc, mc),
                      (weights.lam_dm, dm), (weights.lam_kl, kl)):
        if lam != 0.0:
            total = ad.add(total, ad.mul(term, lam))
    parts = {"mil": float(mil.data), "kd": float(kd.data), "mc": float(mc.data),
             "dm": float(dm.data), "kl": float(kl.data), "total": float(total.data),
             "lam_kd": lam_kd, "lam_mc": weights.lam_mc, "lam_dm": weights.lam_dm,
             "lam_kl": weights.lam_kl}
    return total, parts
