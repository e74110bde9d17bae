"""Adam, and the standard / adversarial (AT) / two-sided perturbation (TSP)
training steps.

TSP perturbs both the inputs (FGSM or PGD) and the kernels of every conv and
dense layer. The weight perturbation ``v`` is found by gradient ascent on the
adversarial loss and rescaled per layer to ``gamma * ||theta_l||``; the
optimizer step is then evaluated at ``theta + v`` and ``v`` is removed again.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import functional as F
from .attacks import AttackConfig, ThreatModel, attack
from .rng import stream
from .tensor import Tape, Tensor

DEFENSES = ("none", "at", "tsp")

Probe = Callable[[str, dict], None]


def loss_and_grads(model, x, y, rng=None, need_params: bool = True, need_input: bool = False,
                   update_stats: bool = True):
    """Mean cross-entropy of ``model`` on (x, y) and its gradients.

    Returns ``(loss, grads, input_grad)`` where ``grads`` maps parameter
    names to arrays (empty unless ``need_params``) and ``input_grad`` is None
    unless ``need_input``.
    """
    xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype),
                track=need_input)
    if not (need_params or need_input):
        logits = model(xt, rng=rng, track_params=False, update_stats=update_stats)
        return float(F.softmax_cross_entropy(logits, y).data), {}, None
    params = model.parameters()
    with Tape() as tape:
        logits = model(xt, rng=rng, track_params=need_params, update_stats=update_stats)
        loss = F.softmax_cross_entropy(logits, y)
    tape.backward(loss)
    grads = {}
    if need_params:
        for name, p in params:
            grads[name] = p.grad
            p.grad = None
    gx = xt.grad if need_input else None
    return float(loss.data), grads, gx


# Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 9e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads: dict) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place."""
    params = list(params)
    for name, _ in params:
        if name not in grads or grads[name] is None:
            raise KeyError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.data -= update


# configuration -------------------------------------------------------------------

@dataclass(frozen=True)
class TSPConfig:
    gamma: float = 0.03
    eta2: float = 0.01
    ascent_steps: int = 1
    perturbed_set: str = "weights"  # or "all"
    persist: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.ascent_steps < 1:
            raise ValueError(f"ascent_steps must be >= 1, got {self.ascent_steps}")
        if self.perturbed_set not in ("weights", "all"):
            raise ValueError(f"perturbed_set must be 'weights' or 'all', got {self.perturbed_set!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    lr: float = 9e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    defense: str = "tsp"
    threat: ThreatModel = ThreatModel()
    attack: AttackConfig = AttackConfig()
    eval_attack: AttackConfig = AttackConfig(kind="pgd", steps=10)
    tsp: TSPConfig = TSPConfig()
    patience: int | None = None
    monitor_samples: int = 256

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}, got {self.defense!r}")

    def optimizer(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


# training steps ----------------------------------------------------------------

def _update(model, x, y, opt: AdamState, rng) -> float:
    model.train()
    loss, grads, _ = loss_and_grads(model, x, y, rng=rng)
    adam_step(opt, model.parameters(), grads)
    return loss


def train_step_standard(model, x, y, opt: AdamState, rng: np.random.Generator) -> float:
    """One Adam step on clean data; returns the batch loss before the step."""
    return _update(model, x, y, opt, rng)


def adversarial_batch(model, x, y, threat: ThreatModel, config: AttackConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Random start in the ball, then an FGSM step or PGD iterations (eval mode)."""
    return attack(model, x, y, threat, config, rng)


def train_step_at(model, x, y, threat: ThreatModel, config: AttackConfig, opt: AdamState,
                  rng: np.random.Generator, attack_rng: np.random.Generator) -> float:
    x_adv = adversarial_batch(model, x, y, threat, config, attack_rng)
    return _update(model, x_adv, y, opt, rng)


def perturbed_names(model, tsp: TSPConfig) -> list[str]:
    if tsp.perturbed_set == "all":
        return [k for k, _ in model.parameters()]
    return model.weight_names()


def weight_ascent(model, x_adv, y, v: dict, eta2: float,
                  rng: np.random.Generator | None = None) -> dict:
    """v + eta2 * dL/dv, with the gradient taken at theta + v in train mode.

    Running statistics are not updated and the parameters are restored
    exactly afterwards.
    """
    params = dict(model.parameters())
    saved = {k: params[k].data.copy() for k in v}
    for k, vk in v.items():
        params[k].data += vk
    was_training = model.training
    model.train()
    try:
        _, grads, _ = loss_and_grads(model, x_adv, y, rng=rng, update_stats=False)
    finally:
        model.training = was_training
        for k, s in saved.items():
            params[k].data[...] = s
    step = params[next(iter(v))].dtype.type(eta2) if v else eta2
    return {k: vk + step * grads[k] for k, vk in v.items()}


def project_weight_perturbation(v: dict, params, gamma: float) -> dict:
    """Rescale each v_l to Frobenius norm gamma * ||theta_l||; zero stays zero."""
    params = dict(params)
    out = {}
    for k, vk in v.items():
        theta = params[k].data if isinstance(params[k], Tensor) else params[k]
        vn = np.linalg.norm(vk.astype(np.float64))
        tn = np.linalg.norm(np.asarray(theta, dtype=np.float64))
        if vn == 0 or tn == 0:
            out[k] = np.zeros_like(vk)
        else:
            out[k] = (vk * (gamma * tn / vn)).astype(vk.dtype)
    return out


def train_step_tsp(model, x, y, threat: ThreatModel, config: AttackConfig, tsp: TSPConfig,
                   opt: AdamState, rng: np.random.Generator, attack_rng: np.random.Generator,
                   ascent_rng: np.random.Generator | None = None, v: dict | None = None,
                   probe: Probe | None = None) -> tuple[float, dict]:
    """One TSP step. Returns the batch loss at theta + v and the perturbation
    used (pass it back in as ``v`` when ``tsp.persist`` is set)."""
    x_adv = adversarial_batch(model, x, y, threat, config, attack_rng)
    names = perturbed_names(model, tsp)
    params = dict(model.parameters())
    if v is None or not tsp.persist:
        v = {k: np.zeros_like(params[k].data) for k in names}
    for _ in range(tsp.ascent_steps):
        v = weight_ascent(model, x_adv, y, v, tsp.eta2, ascent_rng)
        v = project_weight_perturbation(v, model.parameters(), tsp.gamma)
        if probe is not None:
            probe("projection", {"v": v, "params": {k: params[k].data for k in names},
                                 "gamma": tsp.gamma})

    before = {k: params[k].data.copy() for k in names} if probe is not None else None
    for k in names:
        params[k].data += v[k]
    loss = _update(model, x_adv, y, opt, rng)
    stepped = {k: params[k].data.copy() for k in names} if probe is not None else None
    for k in names:
        params[k].data -= v[k]
    if probe is not None:
        probe("step", {"before": before, "v": v, "stepped": stepped,
                       "after": {k: params[k].data for k in names}})
    return loss, v


# fit ------------------------------------------------------------------------

@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, key: str) -> list:
        return [r[key] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


def _nan_to_none(v: float):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


def fit(model, train_set, val_set, config: TrainConfig, probe: Probe | None = None,
        on_epoch: Callable[[int, dict], None] | None = None) -> TrainingLog:
    """Epoch loop over seeded shuffles of ``train_set``.

    Each record holds the mean training loss, clean and robust accuracy on a
    fixed subset of the training data, and the same three numbers on
    ``val_set`` (None when no validation set is given). With
    ``config.patience`` set, training stops once validation robust accuracy
    has not improved for that many epochs.
    """
    from .evaluation import evaluate_robust

    log = TrainingLog()
    if config.epochs == 0:
        return log
    if len(train_set) == 0:
        raise ValueError("training set is empty")

    seed = config.seed
    shuffle_rng = stream(seed, "shuffle")
    dropout_rng = stream(seed, "dropout")
    attack_rng = stream(seed, "attack")
    ascent_rng = stream(seed, "weight_ascent")
    opt = config.optimizer()
    monitor_idx = np.sort(stream(seed, "monitor").permutation(len(train_set))[:config.monitor_samples])
    monitor = train_set.subset(monitor_idx)

    X, Y = train_set.X, train_set.labels
    best, stale = -np.inf, 0
    v = None
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            if config.defense == "none":
                loss = train_step_standard(model, xb, yb, opt, dropout_rng)
            elif config.defense == "at":
                loss = train_step_at(model, xb, yb, config.threat, config.attack, opt,
                                     dropout_rng, attack_rng)
            else:
                loss, v = train_step_tsp(model, xb, yb, config.threat, config.attack, config.tsp,
                                         opt, dropout_rng, attack_rng, ascent_rng, v, probe)
            losses.append(loss)

        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_acc": None,
               "train_racc": None, "val_loss": None, "val_acc": None, "val_racc": None}
        if len(monitor):
            tr = evaluate_robust(model, monitor, config.threat, config.eval_attack,
                                 seed=stream(seed, "eval_attack", epoch, 0).integers(2**31))
            rec.update(train_acc=tr.accuracy, train_racc=tr.r_accuracy)
        if val_set is not None and len(val_set):
            va = evaluate_robust(model, val_set, config.threat, config.eval_attack,
                                 seed=stream(seed, "eval_attack", epoch, 1).integers(2**31))
            rec.update(val_loss=va.loss, val_acc=va.accuracy, val_racc=va.r_accuracy)
        rec = {k: _nan_to_none(val) for k, val in rec.items()}
        log.records.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, rec)

        if config.patience is not None and rec["val_racc"] is not None:
            if rec["val_racc"] > best:
                best, stale = rec["val_racc"], 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    model.eval()
    return log


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
