"""The Inception-based (INC) feature generator and classifier head.

Input batches are laid out (B, n, c, t): frequency subbands act as
convolution channels and the (channel, time) plane is the spatial grid.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor


class BuildError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n: int = 5
    c: int = 62
    t: int = 16
    num_classes: int = 3
    dropout_rate: float = 0.3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float64"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.n, self.c, self.t


class Model:
    """Named parameter registry plus running buffers and a train/eval flag."""

    def __init__(self, dtype="float64"):
        self.dtype = np.dtype(dtype)
        self.training = True
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    # registry -------------------------------------------------------------

    def _add_param(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise BuildError(f"duplicate parameter name {name!r}")
        self._params[name] = Tensor(value.astype(self.dtype), track=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self._buffers.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def weight_names(self) -> list[str]:
        """Names of conv/dense kernels; biases and BN affine terms excluded."""
        return [k for k in self._params if k.endswith(".weight")]

    def layer_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self._params:
            groups.setdefault(name.rsplit(".", 1)[0], []).append(name)
        return groups

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self._params.items()}
        out.update({k: b.copy() for k, b in self._buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = list(self._params) + list(self._buffers)
        for name in expected:
            if name not in state:
                raise WeightFileError(f"missing entry {name!r}")
            target = self._params[name].data if name in self._params else self._buffers[name]
            if state[name].shape != target.shape:
                raise WeightFileError(
                    f"shape mismatch for {name!r}: file {state[name].shape}, model {target.shape}")
        for name in state:
            if name not in self._params and name not in self._buffers:
                raise WeightFileError(f"unexpected entry {name!r}")
        for name in expected:
            target = self._params[name].data if name in self._params else self._buffers[name]
            target[...] = state[name]

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # mode -----------------------------------------------------------------

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.training = mode == "train"

    def train(self) -> "Model":
        self.set_mode("train")
        return self

    def eval(self) -> "Model":
        self.set_mode("eval")
        return self

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    # forward helpers --------------------------------------------------------

    def _p(self, name: str, track: bool) -> Tensor:
        p = self._params[name]
        return p if track else Tensor(p.data)

    def _cast_input(self, x) -> Tensor:
        return as_tensor(x, dtype=self.dtype)

    def __call__(self, x, rng=None, track_params: bool = True, update_stats: bool = True) -> Tensor:
        return self.forward(x, rng=rng, track_params=track_params, update_stats=update_stats)

    def forward(self, x, rng=None, track_params=True, update_stats=True) -> Tensor:
        raise NotImplementedError


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _pooled(size: int, k: int = 4, s: int = 4) -> int:
    return (size - k) // s + 1 if size >= k else 0


# (branch, layer, out channels, kernel)
INCEPTION_BRANCHES = {
    "b1": [("conv", 32, 1)],
    "b2": [("conv1", 96, 1), ("conv2", 128, 3)],
    "b3": [("conv1", 128, 3), ("conv2", 32, 5)],
    "b4": [("pool", None, 3), ("conv", 32, 5)],
}
C1_FILTERS, C1_KERNEL = 64, 5
C2_FILTERS, C2_KERNEL = 256, 5
POOL = 4
HIDDEN = (512, 256, 64)


class IncModel(Model):
    """C1 -> Inception (4 branches) -> C2 -> dense 512/256/64 -> K logits."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__(config.dtype)
        self.config = config
        self.spatial = self._check_dims(config)
        rng = np.random.default_rng(seed)

        self._conv_block("c1", config.n, C1_FILTERS, C1_KERNEL, rng)
        cin = C1_FILTERS
        for branch, layers in INCEPTION_BRANCHES.items():
            ch = cin
            for layer, cout, k in layers:
                if layer == "pool":
                    continue
                bn = "bn" + layer[4:]
                self._conv_block(f"inc.{branch}", ch, cout, k, rng, conv=layer, bn=bn)
                ch = cout
        self._conv_block("c2", self.inception_width, C2_FILTERS, C2_KERNEL, rng)

        h, w = self.spatial["c2.pool"]
        features = C2_FILTERS * h * w
        self.flatten_size = features
        dims = (features,) + HIDDEN + (config.num_classes,)
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            name = f"fc{i + 1}" if i < len(HIDDEN) else "out"
            self._add_param(f"{name}.weight", _he_uniform(rng, (fi, fo), fi))
            self._add_param(f"{name}.bias", np.zeros(fo))

    @property
    def inception_width(self) -> int:
        return sum(layers[-1][1] for layers in INCEPTION_BRANCHES.values())

    @staticmethod
    def _check_dims(config: ModelConfig) -> dict[str, tuple[int, int]]:
        if config.n < 1 or config.num_classes < 2:
            raise BuildError(f"need n >= 1 and at least 2 classes, got {config}")
        h, w = config.c, config.t
        dims = {}
        for stage in ("c1.pool", "c2.pool"):
            h, w = _pooled(h), _pooled(w)
            if h < 1 or w < 1:
                raise BuildError(
                    f"spatial size collapses to {h}x{w} at {stage} "
                    f"(input {config.c}x{config.t}, {POOL}x{POOL} stride-{POOL} valid pooling)")
            dims[stage] = (h, w)
        return dims

    def _conv_block(self, prefix, cin, cout, k, rng, conv="conv", bn="bn"):
        self._add_param(f"{prefix}.{conv}.weight", _he_uniform(rng, (cout, cin, k, k), cin * k * k))
        self._add_param(f"{prefix}.{conv}.bias", np.zeros(cout))
        self._add_param(f"{prefix}.{bn}.scale", np.ones(cout))
        self._add_param(f"{prefix}.{bn}.shift", np.zeros(cout))
        self._buffers[f"{prefix}.{bn}.running_mean"] = np.zeros(cout, dtype=self.dtype)
        self._buffers[f"{prefix}.{bn}.running_var"] = np.ones(cout, dtype=self.dtype)

    def _cbr(self, x, prefix, track, update_stats, conv="conv", bn="bn"):
        p = lambda s: self._p(s, track)
        y = F.conv2d(x, p(f"{prefix}.{conv}.weight"), p(f"{prefix}.{conv}.bias"), padding="same")
        y = F.batchnorm2d(
            y, p(f"{prefix}.{bn}.scale"), p(f"{prefix}.{bn}.shift"),
            self._buffers[f"{prefix}.{bn}.running_mean"], self._buffers[f"{prefix}.{bn}.running_var"],
            training=self.training, eps=self.config.bn_eps, momentum=self.config.bn_momentum,
            update_stats=update_stats)
        return F.relu(y)

    def inception(self, x, track=True, update_stats=True) -> list[Tensor]:
        """Outputs of the four parallel branches, before concatenation."""
        outs = []
        for branch, layers in INCEPTION_BRANCHES.items():
            y = x
            for layer, _, k in layers:
                if layer == "pool":
                    y = F.maxpool2d(y, k, 1, padding="same")
                else:
                    y = self._cbr(y, f"inc.{branch}", track, update_stats, conv=layer, bn="bn" + layer[4:])
            outs.append(y)
        return outs

    def forward(self, x, rng=None, track_params=True, update_stats=True) -> Tensor:
        x = self._cast_input(x)
        if x.data.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ValueError(f"expected batch of shape (B, {self.config.n}, {self.config.c}, "
                             f"{self.config.t}), got {x.shape}")
        rate = self.config.dropout_rate
        y = self._cbr(x, "c1", track_params, update_stats)
        y = F.maxpool2d(y, POOL, POOL, padding="valid")
        y = F.dropout(y, rate, self.training, rng)
        y = F.concat_channels(self.inception(y, track_params, update_stats))
        y = self._cbr(y, "c2", track_params, update_stats)
        y = F.maxpool2d(y, POOL, POOL, padding="valid")
        y = F.dropout(y, rate, self.training, rng)
        y = F.flatten(y)
        for name in ("fc1", "fc2", "fc3"):
            y = F.relu(F.dense(y, self._p(f"{name}.weight", track_params), self._p(f"{name}.bias", track_params)))
        return F.dense(y, self._p("out.weight", track_params), self._p("out.bias", track_params))


def build_inc(config: ModelConfig = ModelConfig(), seed: int = 0) -> IncModel:
    return IncModel(config, seed)


class DenseClassifier(Model):
    """Fully connected ReLU network over flattened inputs; a linear probe when
    ``hidden`` is empty. Shares the INC model's interface so attacks and the
    training loops accept either."""

    def __init__(self, input_shape, num_classes: int = 3, hidden=(), seed: int = 0,
                 dtype="float64"):
        super().__init__(dtype)
        self.input_shape = tuple(input_shape)
        rng = np.random.default_rng(seed)
        dims = (int(np.prod(self.input_shape)),) + tuple(hidden) + (num_classes,)
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            self._add_param(f"fc{i + 1}.weight", _he_uniform(rng, (fi, fo), fi))
            self._add_param(f"fc{i + 1}.bias", np.zeros(fo))
        self.depth = len(dims) - 1

    def forward(self, x, rng=None, track_params=True, update_stats=True) -> Tensor:
        x = self._cast_input(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected trailing shape {self.input_shape}, got {x.shape}")
        y = F.flatten(x)
        for i in range(1, self.depth + 1):
            y = F.dense(y, self._p(f"fc{i}.weight", track_params), self._p(f"fc{i}.bias", track_params))
            if i < self.depth:
                y = F.relu(y)
        return y


# INCW weight file ------------------------------------------------------------

_MAGIC = b"INCW"
_VERSION = 1


def save_weights(model: Model, path) -> None:
    """Parameters then running buffers, stored as little-endian float32."""
    entries = model.state()
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"truncated weight file {path}: need {n} bytes at offset {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != _MAGIC:
        raise WeightFileError(f"{path} is not an INCW weight file (bad magic at offset 0)")
    version, count = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise WeightFileError(f"unsupported INCW version {version} at offset 4")
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(buf):
        raise WeightFileError(f"{len(buf) - pos} trailing bytes after offset {pos} in {path}")
    return entries


def load_weights(model: Model, path) -> None:
    model.load_state(read_weights(path))
