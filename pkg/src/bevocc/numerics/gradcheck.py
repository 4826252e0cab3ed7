"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor  # NonFiniteError subclasses FloatingPointError


class GradCheckError(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


def _scalar(out) -> float:
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise GradCheckError(f"function must return a scalar, got shape {val.shape}")
    return float(val.reshape(()))


def grad_check_report(f, inputs: list[Tensor], eps: float = 1e-5, max_coords: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare backward() gradients of scalar ``f()`` with central differences.

    ``f`` takes no arguments and closes over ``inputs``; each input is
    perturbed in place. With ``max_coords`` only a seeded random subset of
    coordinates per input is differenced.
    """
    for t in inputs:
        t.grad = None
    out = f()
    if not np.isfinite(_scalar(out)):
        raise GradCheckError("non-finite value at the unperturbed point")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, -1, (), 0.0, 0.0, 0)
    checked = 0
    for k, t in enumerate(inputs):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            idx = np.unravel_index(i, t.shape)
            try:
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
            except FloatingPointError as exc:
                raise GradCheckError(f"non-finite function value at input {k}, coordinate {idx}: {exc}") from exc
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite function value at input {k}, coordinate {idx}")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[k].reshape(-1)[i])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            checked += 1
            if rel > worst.max_rel_error or worst.worst_input < 0:
                worst = GradCheckReport(rel, k, idx, ana, num, 0)
    worst.checked = checked
    return worst


def grad_check(f, inputs: list[Tensor], eps: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Max relative error ``|g_a - g_n| / max(1e-8, |g_a| + |g_n|)`` over coordinates."""
    return grad_check_report(f, inputs, eps, max_coords, seed).max_rel_error
