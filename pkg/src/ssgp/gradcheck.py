"""Central finite-difference checks of analytic gradients (float64)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ops import weighted_sum
from .tensor import Graph, KinkRecorder, Parameter, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    checked_entries: int = 0
    tolerance: float = 1e-4
    skipped_entries: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               h: float = 1e-6, max_entries: int | None = None, seed: int = 0,
               skip_kinks: bool = True) -> GradCheckReport:
    """Compare backprop gradients of ``fn(*inputs)`` with central differences.

    The output is reduced with a fixed random projection so every output
    element contributes. All inputs are promoted to float64 for the duration
    of the check and restored afterwards. ``max_entries`` samples that many
    coordinates per input instead of perturbing every one.

    The error per input is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.

    With ``skip_kinks`` a coordinate is left out (and counted in
    ``skipped_entries``) when the ``+h`` and ``-h`` evaluations put some ReLU
    or abs argument on different sides of 0: the difference quotient then
    straddles a point where the function is not differentiable.
    """
    rng = np.random.default_rng(seed)
    saved = [(t.data, t.grad, t.requires_grad) for t in inputs]
    try:
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
            t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None

        probe_out = fn(*inputs)
        proj = rng.standard_normal(probe_out.shape)

        def scalar() -> tuple[float, list[bytes]]:
            with KinkRecorder() as rec:
                value = float(np.sum(fn(*inputs).data.astype(np.float64) * proj))
            return value, rec.patterns

        with Graph() as g:
            loss = weighted_sum(fn(*inputs), proj)
        g.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)
                    for t in inputs]

        errors, total, skipped = [], 0, 0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            num = np.empty(idx.size)
            keep = np.ones(idx.size, dtype=bool)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                up, up_kinks = scalar()
                flat[i] = orig - h
                down, down_kinks = scalar()
                flat[i] = orig
                num[j] = (up - down) / (2 * h)
                keep[j] = not skip_kinks or up_kinks == down_kinks
            errors.append(_rel_error(a.reshape(-1)[idx[keep]], num[keep]))
            total += int(keep.sum())
            skipped += int((~keep).sum())
    finally:
        for t, (data, grad, req) in zip(inputs, saved):
            t.data, t.grad, t.requires_grad = data, grad, req
    return GradCheckReport(max(errors, default=0.0), errors, total, tolerance, skipped)
