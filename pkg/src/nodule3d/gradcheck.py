"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped_kinks: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for name in self.max_rel_error:
            status = "ok" if self.max_rel_error[name] < self.tolerance else "FAIL"
            out.append(
                f"{name}: max_rel_err={self.max_rel_error[name]:.3e} "
                f"checked={self.checked[name]} kinks_skipped={self.skipped_kinks[name]} {status}"
            )
        return out


def grad_check(
    fn: Callable[[], Tensor],
    inputs: dict[str, Tensor] | Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_checks: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` with central finite differences.

    ``fn`` is re-evaluated after each perturbation of the tensors in
    ``inputs`` (which must be float64 leaves with ``requires_grad``). The
    output is reduced to a scalar by a fixed random projection. Coordinates
    where the left and right one-sided differences disagree are treated as
    kinks (e.g. pooling ties) and skipped. ``max_checks`` caps the number of
    sampled coordinates per tensor.
    """
    if not isinstance(inputs, dict):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"{name} must be float64 for a meaningful check, got {t.dtype}")

    rng = np.random.default_rng(seed)
    out = fn()
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        val = float((fn().data * proj).sum())
        if not np.isfinite(val):
            raise NonFiniteError("function produced a non-finite value")
        return val

    for t in inputs.values():
        t.grad = np.zeros_like(t.data)
    out.backward(proj)
    analytic = {k: t.grad.copy() for k, t in inputs.items()}

    report = GradCheckReport(tolerance)
    # a tensor whose true gradient is zero (a bias followed by batch norm) is
    # judged against the largest gradient anywhere, not its own rounding noise
    global_scale = max(float(np.abs(g).max(initial=0.0)) for g in analytic.values())
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        a_flat = analytic[name].reshape(-1)
        f0 = scalar()
        nums, anas, kinks = [], [], 0
        for i in idx:
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = scalar()
            flat[i] = orig - h
            fm = scalar()
            flat[i] = orig
            central = (fp - fm) / (2 * h)
            right, left = (fp - f0) / h, (f0 - fm) / h
            curvature_scale = max(abs(right), abs(left), 1.0)
            if abs(right - left) > 1e-2 * curvature_scale:
                kinks += 1
                continue
            nums.append(central)
            anas.append(a_flat[i])
        nums_a, anas_a = np.array(nums), np.array(anas)
        if nums_a.size:
            floor = max(1e-3 * np.abs(nums_a).max(), 1e-6 * global_scale, 1e-10)
            denom = np.maximum(np.maximum(np.abs(nums_a), np.abs(anas_a)), floor)
            err = float((np.abs(nums_a - anas_a) / denom).max())
        else:
            err = 0.0
        report.max_rel_error[name] = err
        report.checked[name] = int(nums_a.size)
        report.skipped_kinks[name] = kinks
    return report
