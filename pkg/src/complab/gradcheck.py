"""Central finite-difference gradient checking in double precision."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tolerance: float = 1e-4
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numerical_grad(f: Callable[..., float], inputs: Sequence[np.ndarray], h: float = 1e-5,
                   mask: Sequence[np.ndarray | None] | None = None) -> list[np.ndarray]:
    """Central differences of scalar ``f(*inputs)`` w.r.t. every input element.

    Inputs are perturbed in place and restored. Elements where ``mask`` is
    False are left at zero.
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    grads = []
    for k, arr in enumerate(inputs):
        g = np.zeros_like(arr)
        sel = None if mask is None else mask[k]
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            if sel is not None and not sel.reshape(-1)[i]:
                continue
            old = flat[i]
            flat[i] = old + h
            fp = f(*inputs)
            flat[i] = old - h
            fm = f(*inputs)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def grad_check(f: Callable[..., float], inputs: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
               h: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-4,
               mask: Sequence[np.ndarray | None] | None = None) -> GradCheckReport:
    """Compare ``analytic`` gradients of scalar ``f`` against central differences.

    The elementwise relative error is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps near-zero gradient entries from dominating through rounding.
    ``mask`` excludes entries sitting on a kink (ReLU zero, max-pool ties).
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    numeric = numerical_grad(f, inputs, h=h, mask=mask)
    per_input, checked = [], 0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != n.shape:
            raise ValueError(f"analytic gradient {k} has shape {a.shape}, expected {n.shape}")
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if mask is not None and mask[k] is not None:
            err = err[mask[k]]
        checked += err.size
        per_input.append(float(err.max(initial=0.0)))
    return GradCheckReport(max_rel_error=max(per_input, default=0.0), per_input=per_input,
                           tolerance=tolerance, checked=checked)
