"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Parameter, Tensor, check_finite, record_relu_masks


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Optional[tuple[str, tuple]] = None
    n_checked: int = 0
    per_param: dict = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _evaluate(f: Callable[[], Tensor]) -> float:
    with check_finite():
        return float(f().data)


def _central(f, flat, c, h) -> float:
    orig = flat[c]
    flat[c] = orig + h
    up = _evaluate(f)
    flat[c] = orig - h
    down = _evaluate(f)
    flat[c] = orig
    return (up - down) / (2 * h)


def _masks(f: Callable[[], Tensor]) -> tuple[float, list]:
    with check_finite(), record_relu_masks() as masks:
        value = float(f().data)
    return value, masks


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _kink_free(f, flat, c, h, base: list) -> Optional[float]:
    """Central difference at ``h`` if neither end crosses a relu kink, else None."""
    orig = flat[c]
    flat[c] = orig + h
    up, m_up = _masks(f)
    flat[c] = orig - h
    down, m_down = _masks(f)
    flat[c] = orig
    if not (_same(base, m_up) and _same(base, m_down)):
        return None
    return (up - down) / (2 * h)


def _piecewise(f, flat, c, h, min_step: float = 1e-9) -> float:
    """Richardson-corrected central difference at the largest step that stays
    on the current linear piece of every relu.

    Large steps keep roundoff far below tiny gradients; comparing relu masks
    rules out the kinks such steps would otherwise straddle.  The step halves
    until it is kink-free, down to ``min_step`` for points sitting on a kink.
    """
    _, base = _masks(f)
    while h >= min_step:
        d1 = _kink_free(f, flat, c, h, base)
        if d1 is not None:
            d2 = _kink_free(f, flat, c, h / 2, base)
            if d2 is not None:
                return (4 * d2 - d1) / 3
        h /= 2
    return _central(f, flat, c, min_step)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-4,
    n_samples: Optional[int] = 20,
    rng: Optional[np.random.Generator] = None,
    method: str = "central",
) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f()`` against finite differences.

    ``method="central"`` uses one symmetric step of ``eps``; ``"piecewise"``
    halves the step from ``eps`` until the perturbation no longer flips any
    relu.
    ``n_samples`` coordinates are drawn per parameter (all of them when None or
    when the parameter is smaller).  Any non-finite intermediate raises
    :class:`~factnet.tensor.NumericError` naming the offending op.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if method not in ("central", "piecewise"):
        raise ValueError(f"unknown method {method!r}")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    with check_finite():
        out = f()
        out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric_at = _central if method == "central" else _piecewise

    result = GradCheckResult(0.0)
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        if n_samples is None or flat.size <= n_samples:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_samples, replace=False)
        worst_here = 0.0
        for c in coords:
            numeric = numeric_at(f, flat, c, eps)
            err = rel_error(float(g.reshape(-1)[c]), numeric)
            worst_here = max(worst_here, err)
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (p.name or f"param{pi}", np.unravel_index(c, p.dims))
            result.n_checked += 1
        result.per_param[p.name or f"param{pi}"] = worst_here
    for p in params:
        p.grad = None
    return result
