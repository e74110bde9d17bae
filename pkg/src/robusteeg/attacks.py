"""FGSM and PGD adversarial examples under L2 and L-infinity threat models.

Batched arrays carry samples on axis 0; norms, directions and projections are
taken per sample over the remaining axes. A 0-d or 1-d array is one sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor

NORMS = ("linf", "l2")
# L2 projection leaves a point alone unless it lies this far (relatively) outside
# the ball; keeps project() idempotent bit for bit.
_L2_SLACK = 1e-10


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "linf"
    epsilon: float = 8 / 255

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    steps: int = 10
    step_size: float = 15 / 255
    random_init: bool = True

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"attack kind must be 'fgsm' or 'pgd', got {self.kind!r}")
        if self.kind == "pgd" and self.steps < 1:
            raise ValueError(f"PGD needs at least one step, got {self.steps}")
        if self.step_size < 0:
            raise ValueError(f"step size must be non-negative, got {self.step_size}")


def _sample_axes(a: np.ndarray) -> tuple[int, ...]:
    return tuple(range(1, a.ndim)) if a.ndim > 1 else tuple(range(a.ndim))


def _l2(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(a), axis=_sample_axes(a), keepdims=True))


def perturbation_norm(x_adv, x, norm: str) -> np.ndarray:
    """Per-sample ||x_adv - x||_p, computed in double precision."""
    d = np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    if norm == "linf":
        return np.max(np.abs(d), axis=_sample_axes(d)) if d.ndim else np.abs(d)
    return np.sqrt(np.sum(d * d, axis=_sample_axes(d)))


def project(x_adv: np.ndarray, x: np.ndarray, threat: ThreatModel) -> np.ndarray:
    """Map ``x_adv`` back into the epsilon-ball around ``x``."""
    x_adv = np.asarray(x_adv)
    x = np.asarray(x)
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x.shape}")
    eps = threat.epsilon
    if threat.norm == "linf":
        return np.clip(x_adv, x - eps, x + eps)
    delta = x_adv - x
    n = _l2(delta)
    outside = n > eps * (1 + _L2_SLACK)
    if not np.any(outside):
        return x_adv
    scale = np.where(outside, eps / np.where(outside, n, 1), 1).astype(x_adv.dtype)
    return np.where(outside, x + delta * scale, x_adv)


def step_direction(g: np.ndarray, threat: ThreatModel) -> np.ndarray:
    """sign(g) under L-infinity; g/||g||_2 (zero when g is zero) under L2."""
    g = np.asarray(g)
    if threat.norm == "linf":
        return np.sign(g)
    n = _l2(g)
    return np.where(n > 0, g / np.where(n > 0, n, 1), 0).astype(g.dtype)


def random_init(x: np.ndarray, threat: ThreatModel, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x)
    eps = threat.epsilon
    noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    return project(x + noise, x, threat)


def grad_wrt_input(model, x, y) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to ``x``.

    Runs the model in eval mode and restores its previous mode; parameters
    and running statistics are left untouched.
    """
    from .training import loss_and_grads

    was_training = model.training
    model.eval()
    try:
        _, _, gx = loss_and_grads(model, x, y, need_params=False, need_input=True)
    finally:
        model.training = was_training
    return gx


def _ascend(model, x_adv, x, y, threat, step) -> np.ndarray:
    g = grad_wrt_input(model, x_adv, y)
    return project(x_adv + step * step_direction(g, threat).astype(x_adv.dtype), x, threat)


def fgsm(model, x, y, threat: ThreatModel, random_start: bool = False,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """One epsilon-sized step along the loss-gradient direction.

    The gradient is taken at the clean input unless ``random_start`` is set,
    in which case it is taken at a uniform random point of the ball.
    """
    x = _as_array(model, x)
    start = random_init(x, threat, rng) if random_start else x
    return _ascend(model, start, x, y, threat, x.dtype.type(threat.epsilon))


def pgd(model, x, y, threat: ThreatModel, config: AttackConfig = AttackConfig(),
        rng: np.random.Generator | None = None,
        on_iterate: Callable[[np.ndarray], None] | None = None) -> np.ndarray:
    """Projected gradient ascent for ``config.steps`` iterations."""
    x = _as_array(model, x)
    if config.random_init:
        if rng is None:
            raise ValueError("random initialization needs a random generator")
        x_adv = random_init(x, threat, rng)
    else:
        x_adv = x
    if on_iterate is not None:
        on_iterate(x_adv)
    step = x.dtype.type(config.step_size)
    for _ in range(config.steps):
        x_adv = _ascend(model, x_adv, x, y, threat, step)
        if on_iterate is not None:
            on_iterate(x_adv)
    return x_adv


def attack(model, x, y, threat: ThreatModel, config: AttackConfig,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch on ``config.kind``; FGSM honours ``config.random_init``."""
    if config.kind == "fgsm":
        return fgsm(model, x, y, threat, random_start=config.random_init, rng=rng)
    return pgd(model, x, y, threat, config, rng)


def _as_array(model, x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=model.dtype)
