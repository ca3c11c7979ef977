"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def finite_diff_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` (or nothing, when ``x`` is a list of parameters already
    captured by ``f``) to a scalar tensor. ``max_coords`` samples that many
    coordinates per tensor instead of sweeping them all.

    The relative error of one coordinate is
    ``|a - n| / (|a| + |n| + 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def run() -> Tensor:
        return f(xs[0]) if single else f()

    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    backward(run())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        ga = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = run().item()
                flat[i] = orig - eps
                down = run().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(ga[i] - num) / (abs(ga[i]) + abs(num) + 1e-8)
            worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
