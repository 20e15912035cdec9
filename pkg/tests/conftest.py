"""Shared fixtures and the finite-difference gradient oracle."""

import numpy as np
import pytest

from m3snet import tensor as T


def numeric_gradient(fn, tensor, proj, step=1e-4, indices=None):
    """Central finite differences of sum(fn() * proj) w.r.t. tensor entries.

    Perturbs either every coordinate or the given flat indices; everything
    runs in the tensor's own dtype (use float64 inputs for tight checks).
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for j in indices:
        orig = flat[j]
        flat[j] = orig + step
        hi = float((fn().data * proj).sum())
        flat[j] = orig - step
        lo = float((fn().data * proj).sum())
        flat[j] = orig
        grads[j] = (hi - lo) / (2.0 * step)
    return grads


def gradcheck(fn, tensors, rng, tol=1e-4, step=1e-4, max_coords=None):
    """Compare recorded backward against central differences.

    fn(*tensors) must build a fresh graph each call. Relative error is
    measured per coordinate against max(|analytic|, |numeric|, 1e-6).
    Returns the worst relative error over all checked coordinates.
    """
    out = fn(*tensors)
    proj = rng.standard_normal(out.data.shape)
    loss = T.tsum(T.mul(out, T.Tensor(np.asarray(proj, dtype=out.data.dtype))))
    for t in tensors:
        t.zero_grad()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "parameter received no gradient"
        assert t.grad.shape == t.data.shape
        size = t.data.size
        if max_coords is not None and size > max_coords:
            indices = rng.choice(size, size=max_coords, replace=False)
        else:
            indices = range(size)
        numeric = numeric_gradient(lambda: fn(*tensors), t, proj, step=step,
                                   indices=indices)
        analytic = t.grad.reshape(-1)
        for j, num in numeric.items():
            err = abs(analytic[j] - num) / max(abs(analytic[j]), abs(num), 1e-6)
            worst = max(worst, err)
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e} > {tol}"
    return worst


def tensor64(rng, shape, scale=1.0, requires_grad=True):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad,
                    dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
