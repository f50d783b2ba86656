"""Central-difference gradient checking.

Certifies every hand-written backward rule: the analytic gradient of a
scalar-valued function is compared coordinate-by-coordinate against
``(f(x + h e_i) - f(x - h e_i)) / 2h``. Checks run in float64; relative
error uses ``|a - n| / max(|a|, |n|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import AutodiffError, Tape, Tensor, backward_accumulate

__all__ = ["GradCheckReport", "finite_diff_gradcheck"]

MIN_SAMPLED_COORDS = 64


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    coords_checked: int
    worst_coord: Optional[tuple[int, ...]] = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} coords={self.coords_checked}"


def _scalar_value(f: Callable[[Tensor], Tensor], point: Tensor) -> float:
    out = f(point)
    if out.size != 1:
        raise AutodiffError(f"gradcheck target must be scalar-valued, got shape {out.shape}")
    return float(out.data.reshape(()))


def finite_diff_gradcheck(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    n_coords: int = MIN_SAMPLED_COORDS,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare the taped gradient of ``f`` at ``point`` with central differences.

    ``f`` must map a Tensor to a scalar Tensor and rebuild its graph on every
    call. For tensors with more than ``n_coords`` elements a random sample of
    coordinates (at least 64) is checked; smaller tensors are checked fully.
    ``point`` must be float64 so the difference quotient is a trustworthy
    oracle.
    """
    if point.dtype != np.float64:
        raise AutodiffError(f"gradcheck requires a float64 point, got {point.dtype}")
    n_coords = max(n_coords, MIN_SAMPLED_COORDS)

    with Tape() as tape:
        out = f(point)
        if out.size != 1:
            raise AutodiffError(f"gradcheck target must be scalar-valued, got shape {out.shape}")
        point.grad = None
        backward_accumulate(tape, out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()

    flat = point.data.reshape(-1)
    size = flat.size
    if size <= n_coords:
        coords = np.arange(size)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(size, size=n_coords, replace=False)

    analytic_flat = analytic.reshape(-1)
    max_rel = 0.0
    worst = None
    for i in coords:
        original = flat[i]
        try:
            flat[i] = original + step
            f_plus = _scalar_value(f, point)
            flat[i] = original - step
            f_minus = _scalar_value(f, point)
        finally:
            flat[i] = original
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = float(analytic_flat[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(int(i), point.data.shape)

    return GradCheckReport(
        passed=max_rel <= tolerance,
        max_rel_err=max_rel,
        coords_checked=len(coords),
        worst_coord=worst,
    )
