"""Finite-difference verification of reverse-mode gradients.

``check_gradients`` compares the tape's gradient for every leaf against
central differences at the documented step (h = 1e-3), with a refinement
ladder: a coordinate that fails at h is re-probed at h/2, and if the two
finite-difference estimates disagree with each other the coordinate sits
on a non-smooth point (relu/abs/top-k boundary) where the oracle itself
is invalid, so it is excluded rather than failed.  A wrong analytic
gradient produces self-consistent finite differences and still fails.

Checks run in float64 so the oracle noise floor stays far below the
1e-3 relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad

H = 1e-3
RTOL = 1e-3
ATOL = 1e-6
# below this gradient magnitude the central-difference oracle is noise
# bound, so coordinates are judged by absolute error only
REL_SCALE_FLOOR = 1e-4
MAX_SKIP_FRACTION = 0.05


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int
    skipped: int
    passed: bool

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}  {self.name:<38} rel_err={self.max_rel_err:.3e} "
                f"coords={self.checked} skipped={self.skipped}")


def _central(f: Callable[[], float], leaf: ad.Tensor, flat_index: int, h: float) -> float:
    flat = leaf.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = f()
    flat[flat_index] = orig - h
    fm = f()
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def _sample_indices(rng: np.random.Generator, size: int, max_coords: int) -> np.ndarray:
    if size <= max_coords:
        return np.arange(size)
    return rng.choice(size, size=max_coords, replace=False)


def check_gradients(name: str,
                    build: Callable[[], ad.Tensor],
                    leaves: list[ad.Tensor],
                    rng: np.random.Generator | None = None,
                    max_coords_per_leaf: int = 24,
                    h: float = H,
                    rtol: float = RTOL,
                    atol: float = ATOL) -> CheckResult:
    """Verify d(build())/d(leaf) for every leaf against central differences.

    ``build`` must rebuild the forward graph from the same leaves on every
    call (re-seeding any rng it uses) and return a scalar tensor.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ad.ContractError("gradcheck leaves must be float64")
        leaf.grad = None

    loss = build()
    ad.backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    for leaf in leaves:
        leaf.grad = None

    def f() -> float:
        return float(build().data)

    max_rel = 0.0
    checked = 0
    skipped = 0
    failures = 0
    for leaf, a_full in zip(leaves, analytic):
        a_flat = a_full.reshape(-1)
        for idx in _sample_indices(rng, leaf.data.size, max_coords_per_leaf):
            a = a_flat[idx]
            fd1 = _central(f, leaf, idx, h)
            err1 = abs(a - fd1)
            scale = max(abs(a), abs(fd1))
            if err1 <= atol + rtol * scale:
                if scale >= REL_SCALE_FLOOR:
                    max_rel = max(max_rel, err1 / scale)
                checked += 1
                continue
            fd2 = _central(f, leaf, idx, h / 2.0)
            err2 = abs(a - fd2)
            scale2 = max(abs(a), abs(fd2))
            if err2 <= atol + rtol * scale2:
                if scale2 >= REL_SCALE_FLOOR:
                    max_rel = max(max_rel, err2 / scale2)
                checked += 1
                continue
            # the oracle disagreeing with itself marks a kink, not a bug
            if abs(fd1 - fd2) > atol + rtol * max(abs(fd1), abs(fd2)):
                skipped += 1
                continue
            max_rel = max(max_rel, err2 / max(scale2, REL_SCALE_FLOOR))
            checked += 1
            failures += 1

    total = checked + skipped
    ok = (checked > 0 and failures == 0
          and skipped <= max(1, int(MAX_SKIP_FRACTION * total)))
    return CheckResult(name=name, max_rel_err=max_rel, checked=checked,
                       skipped=skipped, passed=ok)
