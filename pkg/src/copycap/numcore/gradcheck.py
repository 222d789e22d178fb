"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def gradcheck(
    fn,
    params: list[Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between autodiff and finite differences.

    ``fn`` must map the current parameter values to a scalar Tensor. Every
    parameter is perturbed coordinate-wise by ``+/- eps`` (central stencil);
    when ``max_coords_per_tensor`` is set a random coordinate subset is
    checked instead of the full tensor. The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1.0)`` so near-zero gradients
    compare absolutely.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        aflat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst
