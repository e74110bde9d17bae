"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable

import numpy as np

# Gradient entries below this magnitude are compared on an absolute scale.
REL_FLOOR = 1e-6


def finite_diff_grad(fn: Callable[[np.ndarray], float], at, h: float = 1e-5,
                     indices=None) -> np.ndarray:
    """(fn(x + h e_i) - fn(x - h e_i)) / 2h for every element i of ``at``.

    When ``indices`` (flat positions) is given only those entries are
    estimated; the others stay zero.
    """
    x = np.array(at, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_model_gradients(model, x, y, entries_per_param: int = 3, h: float = 1e-5,
                          seed: int = 0) -> dict[str, float]:
    """Compare backward() against finite differences for sampled entries of
    every parameter of ``model`` (which must be in eval mode, float64).

    Returns the max relative error per parameter name.
    """
    from .training import loss_and_grads

    if model.training:
        raise ValueError("gradient check needs a deterministic (eval-mode) model")
    rng = np.random.default_rng(seed)
    _, grads, _ = loss_and_grads(model, x, y)
    report = {}
    for name, p in model.parameters():
        k = min(entries_per_param, p.size)
        idx = rng.choice(p.size, size=k, replace=False)
        original = p.data.copy()

        def fn(values, p=p):
            p.data[...] = values
            return loss_and_grads(model, x, y, need_params=False)[0]

        numeric = finite_diff_grad(fn, original, h=h, indices=idx).reshape(-1)[idx]
        p.data[...] = original
        report[name] = relative_error(grads[name].reshape(-1)[idx], numeric)
    return report
