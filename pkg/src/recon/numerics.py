"""Numerically stable primitives shared by every loss, plus a gradient checker.

All arithmetic is done in 64-bit floats. Probabilities are floored at
``EPSILON_FLOOR`` before any logarithm so KL and cross-entropy terms stay
finite no matter how peaked a softmax gets.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .errors import InvalidInput, NumericalFailure

__all__ = [
    "EPSILON_FLOOR",
    "softmax_row",
    "softmax_rows",
    "kl_divergence",
    "matrix_kl",
    "cross_entropy",
    "grad_check",
]

# Floor applied to probabilities before log; keeps KL finite on peaked inputs.
EPSILON_FLOOR = 1e-8


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def softmax_row(scores, temperature: float) -> torch.Tensor:
    """Temperature softmax of a score vector, computed with a max shift.

    Returns a float64 tensor of the same length that sums to 1. Stable for
    score magnitudes up to at least 1e4 at any positive temperature.
    """
    if temperature <= 0 or not np.isfinite(temperature):
        raise InvalidInput(f"temperature must be positive and finite, got {temperature}")
    t = _as_tensor(scores)
    if t.ndim != 1 or t.numel() == 0:
        raise InvalidInput("softmax_row expects a non-empty 1-D score vector")
    if not torch.isfinite(t).all():
        raise InvalidInput("softmax_row scores must be finite")
    z = t / temperature
    z = z - z.max()
    e = torch.exp(z)
    return e / e.sum()


def softmax_rows(scores, temperature: float) -> torch.Tensor:
    """Row-wise temperature softmax of a matrix (each row sums to 1)."""
    if temperature <= 0 or not np.isfinite(temperature):
        raise InvalidInput(f"temperature must be positive and finite, got {temperature}")
    t = _as_tensor(scores)
    if t.ndim != 2 or t.numel() == 0:
        raise InvalidInput("softmax_rows expects a non-empty 2-D score matrix")
    if not torch.isfinite(t).all():
        raise InvalidInput("softmax_rows scores must be finite")
    z = t / temperature
    z = z - z.max(dim=1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=1, keepdim=True)


def _floored(p) -> torch.Tensor:
    return torch.clamp(_as_tensor(p), min=EPSILON_FLOOR)


def kl_divergence(p, q) -> torch.Tensor:
    """KL divergence sum(p * log(p / q)) between two probability vectors.

    Both inputs are floored at EPSILON_FLOOR before the log. Zero iff the
    (floored) vectors coincide elementwise.
    """
    pt, qt = _floored(p), _floored(q)
    if pt.shape != qt.shape or pt.ndim != 1:
        raise InvalidInput(f"kl_divergence needs matching 1-D vectors, got {tuple(pt.shape)} vs {tuple(qt.shape)}")
    return (pt * (torch.log(pt) - torch.log(qt))).sum()


def matrix_kl(p, q) -> torch.Tensor:
    """Row-wise KL between two row-stochastic matrices, averaged over rows."""
    pt, qt = _floored(p), _floored(q)
    if pt.shape != qt.shape or pt.ndim != 2:
        raise InvalidInput(f"matrix_kl needs matching 2-D matrices, got {tuple(pt.shape)} vs {tuple(qt.shape)}")
    return (pt * (torch.log(pt) - torch.log(qt))).sum(dim=1).mean()


def cross_entropy(label, prob) -> torch.Tensor:
    """Weighted negative log probability -label * log(prob), elementwise.

    This is the label-weighted form used for recast correspondence labels:
    a zero label annihilates the term regardless of the probability.
    """
    lab = _as_tensor(label)
    return -lab * torch.log(_floored(prob))


def grad_check(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-5,
    value_fn: Callable[[np.ndarray], float] | None = None,
) -> float:
    """Compare an analytic gradient against central finite differences.

    ``value_and_grad(x)`` must return the scalar loss and its gradient at
    ``x``. ``value_fn``, when given, is used for the probe evaluations (it
    can skip gradient work). Returns the worst coordinate disagreement,
    measured relative to the largest gradient magnitude so that negligible
    components do not drown the comparison; 0.0 when both gradients vanish.
    """
    x = np.asarray(point, dtype=np.float64).copy()
    if x.ndim != 1:
        raise InvalidInput("grad_check expects a 1-D parameter vector")
    if step <= 0:
        raise InvalidInput("step must be positive")
    value, analytic = value_and_grad(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.isfinite(analytic).all():
        raise NumericalFailure("loss or gradient non-finite at the base point")
    if analytic.shape != x.shape:
        raise InvalidInput("gradient shape does not match the parameter vector")

    probe = value_fn if value_fn is not None else (lambda v: value_and_grad(v)[0])
    numeric = np.empty_like(x)
    for i in range(x.size):
        x[i] += step
        f_plus = probe(x)
        x[i] -= 2 * step
        f_minus = probe(x)
        x[i] += step
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalFailure(f"loss non-finite at finite-difference probe for coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2 * step)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
