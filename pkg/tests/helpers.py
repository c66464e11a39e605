"""Shared test utilities: finite-difference gradient checking and small scenes."""

import numpy as np
import torch


def fd_check(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-8):
    """Compare autograd gradients of a scalar fn against central differences (float64).

    Returns the worst relative error; raises AssertionError on mismatch.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().reshape(-1)
        num = torch.zeros_like(flat)
        for j in range(flat.numel()):
            orig = flat[j].item()
            xs = [y.detach() for y in inputs]
            xp = flat.clone()
            xp[j] = orig + eps
            xs_p = [xp.reshape(x.shape) if y is x else y.detach() for y in inputs]
            xm = flat.clone()
            xm[j] = orig - eps
            xs_m = [xm.reshape(x.shape) if y is x else y.detach() for y in inputs]
            with torch.no_grad():
                num[j] = (fn(*xs_p) - fn(*xs_m)) / (2 * eps)
        ana = g.reshape(-1)
        err = (ana - num).abs()
        tol = atol + rtol * torch.maximum(ana.abs(), num.abs())
        bad = err > tol
        if bad.any():
            j = int(torch.nonzero(bad)[0])
            raise AssertionError(f"gradient mismatch at {j}: analytic {ana[j].item():.10g} numeric {num[j].item():.10g}")
        rel = (err / (num.abs() + 1e-12)).max().item() if len(err) else 0.0
        worst = max(worst, rel)
    return worst


def plane_lattice(n=8, spacing=0.02, z=0.0):
    """Regular n x n lattice in the z=const plane."""
    g = np.arange(n) * spacing
    x, y = np.meshgrid(g, g, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], axis=1)


def random_cloud(n, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(n, 3)), rng.uniform(size=(n, 3))
