"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    excluded: list = field(default_factory=list)  # (input index, flat index) at kinks

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.excluded)} nondifferentiable point(s) excluded" if self.excluded else ""
        return (f"{status}  {self.name:<28s} max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} entries{extra})")


def _scalar(fn, arrays) -> float:
    out = fn(*[Tensor(a) for a in arrays])
    return float(np.asarray(out.data, dtype=np.float64).reshape(()))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-4,
    *,
    name: str = "",
    step: Optional[float] = None,
    max_points: Optional[int] = None,
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
    reference_dtype=None,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn(*inputs)`` with central differences.

    Inputs are evaluated at their own dtype. The error of one entry is
    ``|a - n| / max(|a|, |n|, 0.01 * max|n|)``, so entries that are tiny compared
    with the gradient's overall scale are judged on an absolute basis.
    Entries where the one-sided differences disagree by more than ``sqrt(step)``
    are treated as kinks (e.g. ``abs`` at 0) and reported instead of failed.

    ``reference_dtype`` evaluates the finite differences at another precision,
    e.g. float64 differences as the oracle for a float32 tape gradient.
    """
    arrays = [np.array(a, copy=True) for a in inputs]
    dtype = np.result_type(*[a.dtype for a in arrays])
    num_dtype = np.dtype(reference_dtype) if reference_dtype is not None else dtype
    if step is None:
        step = 1e-6 if num_dtype == np.float64 else 1e-2
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    rng = np.random.default_rng(seed)

    with precision(dtype):
        leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = fn(*leaves)
        out.backward()
        analytic = [
            (l.grad if l.grad is not None else np.zeros_like(l.data)).astype(np.float64)
            for l in leaves
        ]

    arrays = [a.astype(num_dtype) for a in arrays]
    with precision(num_dtype):
        a_vals, n_vals, excluded = [], [], []
        kink_tol = np.sqrt(step)
        for i in wrt:
            x = arrays[i]
            flat_idx = np.arange(x.size)
            if max_points is not None and x.size > max_points:
                flat_idx = np.sort(rng.choice(x.size, size=max_points, replace=False))
            f0 = None
            for k in flat_idx:
                idx = np.unravel_index(k, x.shape)
                orig = x[idx]
                x[idx] = orig + step
                fp = _scalar(fn, arrays)
                x[idx] = orig - step
                fm = _scalar(fn, arrays)
                x[idx] = orig
                central = (fp - fm) / (2 * step)
                if f0 is None:
                    f0 = _scalar(fn, arrays)
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
                    excluded.append((i, int(k)))
                    continue
                a_vals.append(analytic[i][idx])
                n_vals.append(central)

    a_vals, n_vals = np.array(a_vals), np.array(n_vals)
    if a_vals.size == 0:
        err = 0.0
    else:
        floor = max(0.01 * float(np.abs(n_vals).max()), 1e-12)
        denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), floor)
        err = float((np.abs(a_vals - n_vals) / denom).max())
    return GradCheckReport(name or getattr(fn, "__name__", "fn"), err, tol, int(a_vals.size), excluded)
