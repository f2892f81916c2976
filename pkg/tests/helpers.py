"""Shared test utilities: finite-difference oracles and small factories."""

from __future__ import annotations

import numpy as np

from prunelab import ndgrad as nd


def numeric_grad(f, x: np.ndarray, coords=None, h: float = 1e-5) -> dict:
    """Central finite differences of scalar f(x) at the given flat coords."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    if coords is None:
        coords = range(flat.size)
    out = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def check_grad(build_loss, params: list[nd.Array], n_coords: int = 20,
               h: float = 1e-5, rtol: float = 1e-4, rng=None) -> float:
    """Compare analytic grads of build_loss() against central differences.

    Returns the worst relative error over the sampled coordinates. The
    relative error uses max(|analytic|, |numeric|, 1e-8) as denominator so
    near-zero gradients do not blow up the ratio.
    """
    rng = rng or np.random.default_rng(0)
    nd.zero_grads(params)
    loss = build_loss()
    nd.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        n = min(n_coords, p.data.size)
        coords = rng.choice(p.data.size, size=n, replace=False)
        flat = p.data.ravel()
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = build_loss().item()
            flat[c] = orig - h
            fm = build_loss().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[pi].ravel()[c]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
            assert err < rtol, (
                f"grad mismatch param {pi} coord {c}: analytic {ana} vs numeric {num}")
    nd.zero_grads(params)
    return worst
