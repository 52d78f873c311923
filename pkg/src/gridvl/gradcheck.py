"""Central finite-difference verification of analytic gradients.

The checker perturbs parameter entries in place, re-evaluates the loss
under no_grad, and compares the central difference against the gradient
produced by one backward pass. Relative error uses
|analytic - numeric| / max(|analytic|, |numeric|, floor), so a sign-flipped
gradient reports an error of ~2 and a zero/zero match reports 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import ContractError, NumericError, Parameter, Tensor, no_grad
from .tensor import precision_bits


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    entries_checked: int


@dataclass
class GradCheckReport:
    tol: float
    step: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tol for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tol]

    def summary(self) -> str:
        lines = [f"grad_check tol={self.tol:g} step={self.step:g}"]
        for e in sorted(self.entries, key=lambda e: -e.max_rel_err):
            status = "ok  " if e.max_rel_err <= self.tol else "FAIL"
            lines.append(
                f"  {status} {e.name}: max_rel_err={e.max_rel_err:.3e} "
                f"({e.entries_checked} entries)"
            )
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries_per_param: int | None = None,
    denom_floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    When max_entries_per_param is set, a seeded sample of entries is probed
    per parameter (every parameter is still covered); otherwise every entry
    is probed. Requires 64-bit precision.

    The relative-error denominator is floored at the resolution of a
    central difference at this loss scale (|f| * ulp / step, scaled by
    1/tol): gradient entries below that floor cannot be distinguished from
    float roundoff of the two loss evaluations, so near-zero gradients are
    not flagged for pure noise.
    """
    if precision_bits() != 64:
        raise ContractError("grad_check requires 64-bit precision mode")
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ContractError("parameter names are not unique")

    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    fd_noise = 4.0 * abs(loss.item()) * np.finfo(np.float64).eps / step
    denom_floor = max(denom_floor, fd_noise / tol)

    picker = Rng(seed)
    report = GradCheckReport(tol=tol, step=step)
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is None or n <= max_entries_per_param:
            indices = np.arange(n)
        else:
            indices = picker.child("entries", p.name).choice(
                n, size=max_entries_per_param, replace=False
            )
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in indices:
            original = flat[i]
            # probes may wander into non-finite territory; that case is
            # reported as NumericError below, not as a numpy warning
            with np.errstate(all="ignore"):
                flat[i] = original + step
                with no_grad():
                    f_plus = f().item()
                flat[i] = original - step
                with no_grad():
                    f_minus = f().item()
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(
                    f"non-finite loss while probing parameter {p.name!r}"
                )
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            if rel > worst:
                worst = rel
        report.entries.append(
            GradCheckEntry(p.name, worst, entries_checked=len(indices))
        )
    return report
