"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_gradient(loss_fn, tensor, eps: float = 1e-3, max_entries: int | None = None,
                     rng: np.random.Generator | None = None):
    """Estimate d loss / d tensor.data. With ``max_entries`` only a random subset
    of coordinates is perturbed; returns ``(indices, estimates)``."""
    flat = tensor.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    est = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        est[n] = (up - down) / (2 * eps)
    return idx, est


def check_gradients(loss_fn, tensors, eps: float = 1e-3, max_entries: int | None = None,
                    seed: int = 0) -> dict:
    """Compare analytic and numeric gradients for each tensor.

    ``loss_fn`` rebuilds the graph and returns a scalar Tensor. Returns a
    mapping from tensor position/name to relative error.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    errors = {}
    for n, (t, g) in enumerate(zip(tensors, analytic)):
        idx, est = numeric_gradient(loss_fn, t, eps, max_entries, rng)
        errors[t.name or n] = relative_error(g.reshape(-1)[idx], est)
    return errors
