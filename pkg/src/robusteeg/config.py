"""Run configuration: a flat ``section.key = value`` text file.

Example::

    # comments start with '#'
    data.path = data/synth.eegf
    train.defense = tsp
    train.epochs = 3
    threat.epsilon = 0.2
    attack.kind = fgsm
    tsp.gamma = 0.01

Unknown keys are rejected. Values are parsed according to the type of the
default they replace; floats also accept fractions such as ``8/255``.
:func:`RunConfig.to_text` writes every key, so a run directory always holds
the fully resolved configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str = ""


@dataclass(frozen=True)
class RunSection:
    out: str = "runs"
    folds: str = "all"
    jobs: int = 1


# model dims (n, c, t) come from the dataset, so they are not configurable here
_MODEL_KEYS = ("num_classes", "dropout_rate", "bn_eps", "bn_momentum", "dtype")
_TRAIN_KEYS = ("batch_size", "epochs", "seed", "lr", "beta1", "beta2", "adam_eps", "defense",
               "patience", "monitor_samples")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    run: RunSection = RunSection()
    model: ModelConfig = ModelConfig(dtype="float32")
    train: TrainConfig = TrainConfig()

    # flat view ----------------------------------------------------------------

    def sections(self) -> dict[str, tuple[object, tuple[str, ...]]]:
        return {
            "data": (self.data, ("path",)),
            "run": (self.run, ("out", "folds", "jobs")),
            "model": (self.model, _MODEL_KEYS),
            "train": (self.train, _TRAIN_KEYS),
            "threat": (self.train.threat, ("norm", "epsilon")),
            "attack": (self.train.attack, ("kind", "steps", "step_size", "random_init")),
            "eval_attack": (self.train.eval_attack, ("kind", "steps", "step_size", "random_init")),
            "tsp": (self.train.tsp, ("gamma", "eta2", "ascent_steps", "perturbed_set", "persist")),
        }

    def items(self) -> list[tuple[str, object]]:
        return [(f"{sec}.{k}", getattr(obj, k)) for sec, (obj, keys) in self.sections().items()
                for k in keys]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def fold_indices(self, num_folds: int) -> list[int]:
        spec = self.run.folds.strip()
        if spec == "all":
            return list(range(num_folds))
        try:
            idx = [int(p) for p in spec.split(",") if p.strip()]
        except ValueError:
            raise ConfigError(f"run.folds must be 'all' or a comma list of fold indices, got {spec!r}")
        bad = [i for i in idx if not 0 <= i < num_folds]
        if bad or not idx:
            raise ConfigError(f"fold index out of range 0..{num_folds - 1}: {spec!r}")
        return idx


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() == "none" and key in ("train.patience",):
        return None
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int) or key == "train.patience":
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def apply(config: RunConfig, pairs) -> RunConfig:
    """Return ``config`` with ``(key, raw string)`` overrides applied."""
    updates: dict[str, dict] = {}
    sections = config.sections()
    for key, raw in pairs:
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec][1]:
            raise ConfigError(f"unknown key {key!r}")
        updates.setdefault(sec, {})[name] = _parse(key, raw, getattr(sections[sec][0], name))
    try:
        train = config.train
        for sec, fld in (("threat", "threat"), ("attack", "attack"), ("eval_attack", "eval_attack"),
                         ("tsp", "tsp")):
            if sec in updates:
                train = replace(train, **{fld: replace(getattr(train, fld), **updates[sec])})
        if "train" in updates:
            train = replace(train, **updates["train"])
        return RunConfig(
            data=replace(config.data, **updates.get("data", {})),
            run=replace(config.run, **updates.get("run", {})),
            model=replace(config.model, **updates.get("model", {})),
            train=train,
        )
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def parse_text(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((key, value))
    return pairs


def load(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    config = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        config = apply(config, parse_text(text, str(path)))
    pairs = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        pairs.append((key.strip(), value))
    return apply(config, pairs)


def defaults_text() -> str:
    return RunConfig().to_text()
