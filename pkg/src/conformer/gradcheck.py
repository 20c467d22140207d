"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import ContractError, Tape, Tensor, record_branches


class NonDeterminismError(ContractError):
    """Two identical forward evaluations disagreed."""


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    shrunk: dict[str, int] = field(default_factory=dict)
    unresolved: dict[str, int] = field(default_factory=dict)
    below_floor: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.__getitem__)
        return name, self.errors[name]

    def format(self, limit: int | None = None) -> str:
        rows = sorted(self.errors.items(), key=lambda kv: -kv[1])
        if limit is not None:
            rows = rows[:limit]
        width = max((len(k) for k, _ in rows), default=10)
        lines = [f"{'parameter':<{width}}  {'elements':>8}  {'max rel err':>12}  {'kinks':>5}  status"]
        for name, err in rows:
            status = "FAIL" if err > self.tol else "ok"
            kinks = self.shrunk.get(name, 0)
            lines.append(f"{name:<{width}}  {self.checked[name]:>8}  {err:12.3e}  {kinks:>5}  {status}")
        name, err = self.worst
        total = sum(self.checked.values())
        lines.append(f"checked {total} elements; {sum(self.shrunk.values())} needed a smaller step to avoid "
                     f"a kink, {sum(self.unresolved.values())} skipped as unresolvable, "
                     f"{sum(self.below_floor.values())} below the noise floor")
        lines.append(f"worst: {name} {err:.3e} (tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def roundoff_floor(loss: float, eps: float, tol: float) -> float:
    """Smallest derivative a central difference resolves to relative ``tol``.

    One ulp of the loss in each probe gives about eps_mach * |loss| / eps of
    noise in the estimate; below this magnitude that noise exceeds ``tol``.
    """
    return float(np.finfo(np.float64).eps) * max(abs(loss), 1.0) / (eps * tol)


def grad_check(
    forward: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    min_eps: float = 1e-8,
    noise_floor: float | str | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    ``forward`` must be a deterministic closure over ``params`` returning a
    scalar. With ``max_elements`` set, at most that many randomly chosen
    entries of each parameter are perturbed.

    Central differences are only meaningful while both probes stay on the
    same side of every ReLU / max-pool kink. Each probe records the branch
    pattern of the forward pass; when it differs from the unperturbed one
    the step is halved (down to ``min_eps``) and retried. Elements
    that never settle are reported in ``unresolved`` and left out of the
    error statistic.

    ``noise_floor`` (off by default) leaves out elements whose analytic and
    numeric derivatives are both smaller than it in magnitude; they are
    counted in ``below_floor``. Use it only when such gradients sit at the
    roundoff level of the loss divided by the step. ``noise_floor="roundoff"``
    derives it from the loss: see :func:`roundoff_floor`.
    """
    with Tape() as tape, record_branches() as pattern:
        loss = forward()
    grads = tape.backward(loss)
    base = float(loss.data)
    with record_branches() as again_pattern:
        again = float(forward().data)
    if again != base or again_pattern != pattern:
        raise NonDeterminismError(f"forward is not deterministic: {base!r} then {again!r}")
    if noise_floor == "roundoff":
        noise_floor = roundoff_floor(base, eps, tol)
    elif isinstance(noise_floor, str):
        raise ValueError(f"noise_floor must be a number, None or 'roundoff', got {noise_floor!r}")

    def probe(p: Tensor, original: np.ndarray, i: int, step: float) -> tuple[float, bool]:
        work = original.copy()
        flat = work.reshape(-1)
        flat[i] = original.reshape(-1)[i] + step
        p.data = work
        with record_branches() as plus:
            f_plus = float(forward().data)
        flat[i] = original.reshape(-1)[i] - step
        with record_branches() as minus:
            f_minus = float(forward().data)
        return (f_plus - f_minus) / (2 * step), plus == pattern and minus == pattern

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = grads[p].reshape(-1)
        flat_idx = np.arange(p.size)
        if max_elements is not None and p.size > max_elements:
            flat_idx = np.sort(rng.choice(p.size, size=max_elements, replace=False))
        original = p.data
        keep, numeric = [], []
        shrunk = unresolved = 0
        try:
            for i in flat_idx:
                step = eps
                value, smooth = probe(p, original, i, step)
                while not smooth and step / 2 >= min_eps:
                    step /= 2
                    value, smooth = probe(p, original, i, step)
                if step != eps:
                    shrunk += 1
                if smooth:
                    keep.append(i)
                    numeric.append(value)
                else:
                    unresolved += 1
        finally:
            p.data = original
        keep = np.asarray(keep, dtype=np.int64)
        a = analytic[keep].astype(np.float64)
        n = np.asarray(numeric, dtype=np.float64)
        if noise_floor is not None:
            big = np.maximum(np.abs(a), np.abs(n)) >= noise_floor
            if (~big).any():
                report.below_floor[name] = int((~big).sum())
            a, n = a[big], n[big]
        err = relative_error(a, n)
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = len(flat_idx)
        if shrunk:
            report.shrunk[name] = shrunk
        if unresolved:
            report.unresolved[name] = unresolved
    return report
