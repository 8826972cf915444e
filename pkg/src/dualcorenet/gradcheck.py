"""Central finite differences as an independent gradient oracle.

A difference quotient only estimates the derivative when both stencil points
lie on the same smooth piece as the centre.  With ``piecewise=True`` every
evaluation records the branch pattern of the ReLU, max and clamp ops it runs;
a stencil that changes any pattern is retried with a smaller step and, if it
keeps straddling a kink, the coordinate is left out (reported as NaN).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, branch_probe, no_grad

STEP_SHRINK = 10.0
MAX_SHRINKS = 3


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-6,
                     indices: Sequence[int] | None = None, piecewise: bool = False,
                     order: int = 2) -> np.ndarray:
    """Estimate d f / d x with a central stencil of step ``epsilon``.

    ``order=2`` is ``(f(x+h) - f(x-h)) / 2h``; ``order=4`` adds the ``±2h``
    points, ``(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h``, whose
    smaller truncation error allows a larger, less roundoff-prone step.
    ``x`` is perturbed in place and restored.  When ``indices`` (flat) is
    given only those coordinates are estimated; the rest of the result is NaN.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    offsets = (1, -1) if order == 2 else (1, -1, 2, -2)
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan) if indices is not None or piecewise else np.zeros(flat.shape)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        base = None
        if piecewise:
            with branch_probe() as base:
                f(x)
        for i in coords:
            orig = flat[i]
            eps = epsilon
            for _ in range(MAX_SHRINKS + 1 if piecewise else 1):
                values, smooth = {}, True
                for k in offsets:
                    with branch_probe() as pattern:
                        flat[i] = orig + k * eps
                        values[k] = float(f(x).data)
                    smooth = smooth and (not piecewise or _same(pattern, base))
                flat[i] = orig
                if smooth:
                    if order == 2:
                        out[i] = (values[1] - values[-1]) / (2 * eps)
                    else:
                        out[i] = (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * eps)
                    break
                eps /= STEP_SHRINK
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], epsilon: float = 1e-6,
                    max_coords: int | None = None, rng: np.random.Generator | None = None,
                    piecewise: bool = False, skipped: dict | None = None, order: int = 2) -> dict[str, float]:
    """Compare backward() against finite differences for each named tensor.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are probed.  Returns the relative error per name; coordinates whose
    stencil straddles a kink (``piecewise=True``) are counted in ``skipped``.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = finite_diff_grad(lambda _: loss_fn(), p, epsilon, indices=idx,
                                   piecewise=piecewise, order=order).reshape(-1)[idx]
        ok = np.isfinite(numeric)
        if skipped is not None:
            skipped[name] = int((~ok).sum())
        errors[name] = relative_error(analytic.reshape(-1)[idx][ok], numeric[ok]) if ok.any() else 0.0
    return errors
