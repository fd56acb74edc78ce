"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from molar.numcore.tensor import Tensor

ERR_FLOOR = 1e-7


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return "", 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERR_FLOOR) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_diff_gradcheck(forward: Callable[[], Tensor], params: Sequence[Tensor],
                          tolerance: float = 1e-3, h: float = 1e-5,
                          corrupt: float = 0.0, max_entries: int | None = None,
                          rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare analytic gradients of the scalar ``forward()`` with central differences.

    ``corrupt`` is added to every analytic gradient entry (negative control).
    ``max_entries`` caps the number of probed coordinates per tensor; the
    probed subset is drawn from ``rng``.
    """
    for p in params:
        p.grad = np.zeros_like(p.data) if p.requires_grad else None
    out = forward()
    out.backward()
    report = GradcheckReport(tolerance)
    for i, p in enumerate(params):
        name = p.name or f"input{i}"
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) + corrupt
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = forward().item()
            flat[c] = orig - h
            down = forward().item()
            flat[c] = orig
            numeric[j] = (up - down) / (2 * h)
        report.errors[name] = relative_error(analytic.reshape(-1)[coords], numeric)
    return report
