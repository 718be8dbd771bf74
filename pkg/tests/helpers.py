"""Shared test utilities: finite-difference gradient oracle and small builders."""

import numpy as np
import torch


def central_diff_grad(loss_fn, param: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar loss w.r.t. every element of param."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(loss_fn())
        flat[i] = orig - eps
        lo = float(loss_fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_err(analytic: torch.Tensor, numeric: torch.Tensor, atol: float = 1e-8) -> float:
    """Worst-case relative error with an absolute floor for near-zero entries."""
    a = analytic.detach().double()
    n = numeric.double()
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(atol, dtype=torch.float64))
    err = (a - n).abs() / denom
    keep = (a.abs() > atol) | (n.abs() > atol)
    if not bool(keep.any()):
        return 0.0
    return float(err[keep].max())


def check_gradients(loss_fn, named_params, eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare autograd gradients against central differences, parameter by parameter.

    loss_fn must rebuild the graph each call. Returns {name: max relative error}
    and asserts nothing; callers decide.
    """
    loss = loss_fn()
    params = [p for _, p in named_params]
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    with torch.no_grad():
        pass
    for (name, param), a in zip(named_params, analytic):
        a = torch.zeros_like(param) if a is None else a
        numeric = central_diff_grad(lambda: loss_fn().item(), param, eps)
        out[name] = max_rel_err(a, numeric)
    return out


def blob_data(n_per: int, centers, spread: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs with known membership, for clustering oracles."""
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for i, c in enumerate(centers):
        pts.append(rng.normal(loc=c, scale=spread, size=(n_per, len(c))))
        labels += [i] * n_per
    return np.concatenate(pts), np.array(labels)
