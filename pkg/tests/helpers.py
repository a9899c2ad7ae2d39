"""Finite-difference utilities shared by the gradient tests."""

import numpy as np

from isrl import autodiff as ad


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` (array -> float)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def autodiff_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) with respect to each input array."""
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(*ts)
        grads = tape.gradient(out, ts)
    return out.item(), [g.data for g in grads]


def value(build, arrays) -> float:
    with ad.no_record():
        return build(*[ad.Tensor(a) for a in arrays]).item()


# settings for trainer tests that only need a few fast steps
TINY = {"epochs": 3, "batch_size": 16, "max_steps_per_epoch": 2, "srl_batch": 4, "image_widths": (4, 4, 4),
        "shape_widths": (2, 4, 4), "image_dim": 8, "shape_dim": 4, "hidden": 8, "shape_input": "latent"}
