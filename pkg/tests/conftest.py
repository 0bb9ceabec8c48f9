"""Shared test helpers: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from seqdec import nn


def finite_difference_check(build_loss, arrays, h=1e-5, abs_tol=1e-6, rel_tol=1e-3):
    """Compare reverse-mode gradients with central differences.

    ``build_loss`` maps plain numpy arrays (wrapped as tensors) to a scalar
    loss tensor and must be deterministic across calls.  Every entry of
    every input must satisfy |num - ana| <= max(abs_tol, rel_tol * |num|).
    """
    tensors = [nn.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    nn.backward(loss)

    def evaluate(mutated):
        return float(build_loss(*[nn.Tensor(m) for m in mutated]).data)

    for which, (tensor, base) in enumerate(zip(tensors, arrays)):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(base)
        work = [a.copy() for a in arrays]
        flat = work[which].reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate(work)
            flat[i] = orig - h
            down = evaluate(work)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
        gap = np.abs(numeric - analytic.reshape(-1))
        bound = np.maximum(abs_tol, rel_tol * np.abs(numeric))
        worst = np.max(gap - bound)
        assert np.all(gap <= bound), (
            f"input {which}: worst excess {worst:.3e} "
            f"(max gap {gap.max():.3e})"
        )
