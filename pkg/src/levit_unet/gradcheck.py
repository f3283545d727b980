"""
Finite-difference gradient checking.

By default the inputs are promoted to float64 for the duration of the check
(the "shadow" path) so that central differences with a tiny step stay clear
of both round-off and ReLU/hardswish kinks.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class GradCheckFailure:
    input_index: int
    coordinate: Tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradCheckReport:
    max_relative_error: float
    tolerance: float
    checked: int
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"grad_check checked={self.checked} max_rel_error={self.max_relative_error:.3e} tol={self.tolerance}"]
        for f in self.failures[:20]:
            lines.append(
                f"  input={f.input_index} coord={f.coordinate} analytic={f.analytic:.6e} "
                f"numeric={f.numeric:.6e} rel={f.relative_error:.3e}"
            )
        return "\n".join(lines)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-2,
    double: bool = True,
    eps: Optional[float] = None,
    samples: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of sum(fn()) with central differences.

    fn: closure recomputing the output from `inputs` (read through their
        `.data`, so perturbations are seen).
    samples: check this many random coordinates per input instead of all.
    floor: denominators below this are clamped, so near-zero gradients are
        compared absolutely.
    """
    step = eps if eps is not None else (1e-6 if double else 1e-3)
    originals = [(t.data, t.requires_grad, t.grad) for t in inputs]
    rng = np.random.default_rng(seed)
    failures: List[GradCheckFailure] = []
    max_rel = 0.0
    checked = 0
    try:
        for t in inputs:
            t.data = np.array(t.data, dtype=np.float64 if double else t.data.dtype)
            t.requires_grad = True
            t.grad = None

        out = fn()
        out.sum().backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        with no_grad():
            for index, t in enumerate(inputs):
                flat = t.data.reshape(t.data.size)
                if samples is None or samples >= flat.size:
                    coords = np.arange(flat.size)
                else:
                    coords = rng.choice(flat.size, size=samples, replace=False)
                for c in coords:
                    original = flat[c]
                    flat[c] = original + step
                    plus = float(np.sum(fn().data, dtype=np.float64))
                    flat[c] = original - step
                    minus = float(np.sum(fn().data, dtype=np.float64))
                    flat[c] = original
                    numeric = (plus - minus) / (2.0 * step)
                    exact = float(analytic[index].reshape(flat.size)[c])
                    rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                    checked += 1
                    max_rel = max(max_rel, rel)
                    if rel > tol:
                        coord = tuple(int(i) for i in np.unravel_index(int(c), t.data.shape))
                        failures.append(GradCheckFailure(index, coord, exact, numeric, rel))
    finally:
        for t, (data, requires_grad, grad) in zip(inputs, originals):
            t.data = data
            t.requires_grad = requires_grad
            t.grad = grad

    report = GradCheckReport(max_rel, tol, checked, failures)
    if failures:
        logger.warning(report.summary())
    else:
        logger.debug(report.summary())
    return report
