"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from . import choices
from .tensor import Tensor, backward, no_grad, param_key


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    params: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def failures(self) -> list:
        return [p for p in self.params if p.max_rel_error > self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"{'parameter':40s} {'entries':>8s} {'max rel err':>12s}"]
        for p in self.params:
            flag = "  FAIL" if p.max_rel_error > self.tolerance else ""
            lines.append(f"{p.name:40s} {p.checked:8d} {p.max_rel_error:12.3e}{flag}")
        lines.append(f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Union[Sequence[Tensor], Mapping[str, Tensor]],
    eps: float = 1e-4,
    tolerance: float = 1e-3,
    floor: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the parameters it closes over; entries
    are perturbed in place and restored. Discrete decisions made during the
    first evaluation are replayed in every perturbed one. ``max_entries``
    samples that many entries per parameter instead of checking all of them.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(param_key(p), p) for p in params]

    with choices.recording() as log:
        loss = f()
    grads = backward(loss, [p for _, p in named])

    def evaluate() -> float:
        with no_grad(), choices.replaying(log):
            return float(f().data)

    base = float(loss.data)
    first, second = evaluate(), evaluate()
    if first != second or first != base:
        raise NonDeterministicError(
            f"f is not deterministic: {base!r}, {first!r}, {second!r} at identical inputs")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, eps=eps)
    for name, p in named:
        g = grads[param_key(p)]
        flat = p.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = (-1.0, 0, 0.0, 0.0)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            plus = evaluate()
            flat[i] = orig - eps
            lo = float(flat[i])
            minus = evaluate()
            flat[i] = orig
            # stored perturbations, not eps itself: float32 storage rounds them
            numeric = (plus - minus) / (hi - lo)
            analytic = float(g.reshape(-1)[i])
            err = float(relative_error(analytic, numeric, floor))
            if err > worst[0]:
                worst = (err, int(i), analytic, numeric)
        report.params.append(ParamCheck(
            name=name, checked=len(indices), max_rel_error=max(worst[0], 0.0),
            worst_index=np.unravel_index(worst[1], p.shape) if p.shape else (),
            analytic=worst[2], numeric=worst[3]))
    return report
