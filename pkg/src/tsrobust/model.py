"""Compact fully-convolutional time series classifier and its training loop."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import AugmentLayer, layer_from_dict
from .data import ConfigError, Dataset
from .tensor import (
    Tensor,
    affine,
    backward,
    conv1d,
    cross_entropy,
    global_avg_pool,
    relu,
    reshape,
    softmax_t,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tsrobust-classifier"
CHECKPOINT_VERSION = 1
EVAL_CHUNK = 256


class TrainingError(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    channels: Sequence[int] = (32, 64, 32)
    kernel_sizes: Sequence[int] = (7, 5, 3)
    n_classes: int = 2
    temperature: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernel_sizes = tuple(int(w) for w in self.kernel_sizes)
        if not self.channels or len(self.channels) != len(self.kernel_sizes):
            raise ConfigError("need at least one conv block and one kernel width per block")
        if min(self.channels) < 1 or min(self.kernel_sizes) < 1 or self.n_classes < 1:
            raise ConfigError("channel widths, kernel widths and class count must be >= 1")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr >= 0 or not 0 <= self.momentum < 1:
            raise ConfigError(f"need lr >= 0 and 0 <= momentum < 1, got {self.lr}, {self.momentum}")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


class Classifier:
    """Conv blocks with ReLU, global average pooling, an affine head and softmax at ``T``.

    An optional augmentation layer runs on the raw input before the first
    convolution. ``seed`` drives parameter initialization and the default
    stream used by the front layer at inference.
    """

    def __init__(
        self,
        config: ClassifierConfig,
        input_length: int,
        seed: int = 0,
        front: Optional[AugmentLayer] = None,
    ):
        self.config = config
        self.input_length = int(input_length)
        self.seed = int(seed)
        self.front = front
        self.rng = np.random.default_rng([self.seed, 1])
        self.params = self._init_params(np.random.default_rng([self.seed, 0]))

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params = {}
        cin = 1
        for i, (cout, w) in enumerate(zip(self.config.channels, self.config.kernel_sizes)):
            if w > self.input_length:
                raise ConfigError(f"kernel width {w} exceeds input length {self.input_length}")
            std = np.sqrt(2.0 / (cin * w))
            params[f"conv{i}.weight"] = Tensor(rng.normal(0.0, std, (cout, cin, w)), requires_grad=True)
            params[f"conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            cin = cout
        bound = np.sqrt(6.0 / (cin + self.config.n_classes))
        params["head.weight"] = Tensor(rng.uniform(-bound, bound, (self.config.n_classes, cin)), requires_grad=True)
        params["head.bias"] = Tensor(np.zeros(self.config.n_classes), requires_grad=True)
        return params

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def stochastic(self) -> bool:
        return self.front is not None and self.front.stochastic and self.front.test_time

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Stop tracking parameter gradients, e.g. while attacking the input."""
        saved = [(p, p.requires_grad) for p in self.params.values()]
        for p, _ in saved:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def _as_input(self, X) -> Tensor:
        X = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=np.float64))
        if X.data.ndim == 1:
            X = reshape(X, (1, -1))
        if X.data.ndim != 2 or X.shape[1] != self.input_length:
            raise ValueError(f"expected input [batch, {self.input_length}], got {X.shape}")
        return X

    def logits(self, X, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        X = self._as_input(X)
        if self.front is not None:
            X = self.front(X, self.rng if rng is None else rng, train_mode)
        h = reshape(X, (X.shape[0], 1, X.shape[1]))
        for i in range(len(self.config.channels)):
            h = relu(conv1d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"]))
        return affine(global_avg_pool(h), self.params["head.weight"], self.params["head.bias"])

    def forward(self, X, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Class probabilities ``[batch, C]`` at the configured temperature."""
        return softmax_t(self.logits(X, train_mode, rng), self.config.temperature)

    __call__ = forward

    def predict_proba(self, X, repeats: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Mean of ``repeats`` forward passes, evaluated without gradient tracking."""
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        out = np.zeros((X.shape[0], self.n_classes))
        for start in range(0, X.shape[0], EVAL_CHUNK):
            chunk = X[start:start + EVAL_CHUNK]
            acc = np.zeros((chunk.shape[0], self.n_classes))
            for _ in range(repeats):
                acc += self.forward(chunk, rng=rng).data
            out[start:start + EVAL_CHUNK] = acc / repeats
        return out

    def predict(self, X, repeats: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class index
        return self.predict_proba(X, repeats, rng).argmax(axis=1)

    # persistence ----------------------------------------------------------

    def copy(self) -> "Classifier":
        return Classifier.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "input_length": self.input_length,
            "seed": self.seed,
            "front": self.front.to_dict() if self.front is not None else None,
            "params": {
                name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
                for name, p in self.params.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Classifier":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint {d.get('format')!r} v{d.get('version')}")
        m = cls(ClassifierConfig(**d["config"]), d["input_length"], d["seed"], layer_from_dict(d["front"]))
        for name, entry in d["params"].items():
            m.params[name] = Tensor(np.array(entry["values"], dtype=np.float64).reshape(entry["shape"]),
                                    requires_grad=True)
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Classifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


BatchHook = Callable[[Classifier, np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def train(
    model: Classifier,
    d: Dataset,
    tc: TrainConfig,
    soft_targets: Optional[np.ndarray] = None,
    batch_hook: Optional[BatchHook] = None,
    loss_scale: float = 1.0,
) -> TrainResult:
    """Mini-batch SGD with momentum on cross-entropy; updates ``model`` in place.

    ``soft_targets`` (``[n, C]``) replaces the hard labels. ``batch_hook`` may
    rewrite every mini-batch before the step (adversarial training uses it to
    append adversarial twins). ``loss_scale`` multiplies the gradient only;
    the reported loss is unscaled. Returns the per-epoch mean loss.
    """
    if d.n == 0:
        raise TrainingError("cannot train on an empty dataset")
    if d.length != model.input_length:
        raise ValueError(f"dataset length {d.length} != model input length {model.input_length}")
    targets = d.labels if soft_targets is None else np.asarray(soft_targets, dtype=np.float64)
    shuffle_rng, aug_rng, hook_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(tc.seed).spawn(3))
    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(tc.epochs):
        if model.front is not None:
            model.front.start_epoch(aug_rng)
        order = shuffle_rng.permutation(d.n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, d.n, tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            xb, yb = d.series[idx], targets[idx]
            if batch_hook is not None:
                xb, yb = batch_hook(model, xb, yb, hook_rng)
            model.zero_grad()
            loss = cross_entropy(model.forward(xb, train_mode=True, rng=aug_rng), yb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            backward(loss if loss_scale == 1.0 else loss * loss_scale)
            for name, p in model.params.items():
                v = velocity[name]
                v *= tc.momentum
                v -= tc.lr * p.grad
                p.data += v
            total += value * len(idx)
            count += len(idx)
        result.losses.append(total / count)
        if epoch % 50 == 0 or epoch == tc.epochs - 1:
            logger.debug("epoch %d loss %.5f", epoch, result.losses[-1])
    result.seconds = time.perf_counter() - t0
    return result
