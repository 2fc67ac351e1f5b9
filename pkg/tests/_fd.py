"""Central finite differences against autograd."""

import numpy as np
import torch

STEP = 1e-5
TOL = 1e-4


def relative_error(fn, leaves, max_coords=48, seed=0):
    """Worst relative error over leaves between autograd and central differences."""
    out = fn()
    grads = torch.autograd.grad(out, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, g in zip(leaves, grads):
        flat = leaf.data.view(-1)
        idx = np.arange(flat.numel())
        if len(idx) > max_coords:
            idx = np.sort(rng.choice(len(idx), max_coords, replace=False))
        numeric = []
        with torch.no_grad():
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + STEP
                f_plus = float(fn())
                flat[i] = orig - STEP
                f_minus = float(fn())
                flat[i] = orig
                numeric.append((f_plus - f_minus) / (2 * STEP))
        analytic = g.reshape(-1)[torch.from_numpy(idx)].numpy()
        numeric = np.array(numeric)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst


def projector(shape, seed=1):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))
