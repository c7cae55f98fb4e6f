"""Shared oracles: central finite differences against the autodiff engine."""

import numpy as np


def finite_diff_grad(f, tensor, h=1e-5):
    """Central-difference gradient of scalar-valued f() w.r.t. tensor.data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f().item()
        flat[i] = orig - h
        lm = f().item()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


def check_gradients(f, tensors, h=1e-5, tol=1e-4):
    """Backward once, then compare each tensor's grad to finite differences."""
    loss = f()
    loss.backward()
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, f"no grad on {t.name}"
        num = finite_diff_grad(f, t, h=h)
        worst = max(worst, relative_error(t.grad, num))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e}"
    return worst
