"""Randomized augmentation layers placed in front of a classifier.

Every method first samples a concrete transform for the call (a mask, a noise
draw or a fixed smoothing kernel) and then applies it. Inside a forward pass
the sampled transform is treated as a constant, so gradients flow through it
exactly as through the equivalent fixed masking/linear operation.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ConfigError
from .tensor import Tensor, add, conv1d, mul, reshape


class AugmentMethod(str, enum.Enum):
    JITTER = "jitter"
    RANDOM_ZERO = "random_zero"
    SEGMENT_ZERO = "segment_zero"
    GAUSSIAN_NOISE = "gaussian_noise"
    SMOOTH = "smooth"
    NONE = "none"


ALL_METHODS: tuple[AugmentMethod, ...] = (
    AugmentMethod.JITTER,
    AugmentMethod.RANDOM_ZERO,
    AugmentMethod.SEGMENT_ZERO,
    AugmentMethod.GAUSSIAN_NOISE,
    AugmentMethod.SMOOTH,
    AugmentMethod.NONE,
)


@dataclass
class JitterConfig:
    p_j: float = 0.75
    noise_level: float = 1.0


@dataclass
class RandomZeroConfig:
    p_r: float = 0.5


@dataclass
class SegmentZeroConfig:
    total_zero_length: float = 0.25
    max_segment_length: float = 0.05


@dataclass
class GaussianNoiseConfig:
    mu: float = 0.0
    sigma_g: float = 0.3


@dataclass
class SmoothConfig:
    kernel_size: int = 10
    sigma_s: float = 5.0


@dataclass
class AugmentConfig:
    jitter: JitterConfig = field(default_factory=JitterConfig)
    random_zero: RandomZeroConfig = field(default_factory=RandomZeroConfig)
    segment_zero: SegmentZeroConfig = field(default_factory=SegmentZeroConfig)
    gaussian_noise: GaussianNoiseConfig = field(default_factory=GaussianNoiseConfig)
    smooth: SmoothConfig = field(default_factory=SmoothConfig)

    def __post_init__(self):
        _check_prob(self.jitter.p_j, "p_j")
        _check_prob(self.random_zero.p_r, "p_r")
        if self.jitter.noise_level < 0 or self.gaussian_noise.sigma_g < 0 or self.smooth.sigma_s < 0:
            raise ConfigError("noise_level, sigma_g and sigma_s must be non-negative")
        sz = self.segment_zero
        if not 0 <= sz.total_zero_length <= 1:
            raise ConfigError(f"total_zero_length must lie in [0, 1], got {sz.total_zero_length}")
        if not 0 < sz.max_segment_length <= 1:
            raise ConfigError(f"max_segment_length must lie in (0, 1], got {sz.max_segment_length}")
        if self.smooth.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AugmentConfig":
        d = d or {}
        return cls(
            jitter=JitterConfig(**d.get("jitter", {})),
            random_zero=RandomZeroConfig(**d.get("random_zero", {})),
            segment_zero=SegmentZeroConfig(**d.get("segment_zero", {})),
            gaussian_noise=GaussianNoiseConfig(**d.get("gaussian_noise", {})),
            smooth=SmoothConfig(**d.get("smooth", {})),
        )


def _check_prob(p: float, name: str) -> None:
    if not 0 <= p <= 1:
        raise ConfigError(f"{name} must lie in [0, 1], got {p}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# transforms ---------------------------------------------------------------


@dataclass
class Transform:
    """One sampled augmentation: ``x * scale + offset`` or a smoothing kernel."""

    method: AugmentMethod
    scale: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    kernel: Optional[np.ndarray] = None

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kernel is not None:
            return smooth_with_kernel(x, self.kernel)
        out = x
        if self.scale is not None:
            out = out * self.scale
        if self.offset is not None:
            out = out + self.offset
        return out

    def apply_tensor(self, x: Tensor) -> Tensor:
        if self.kernel is not None:
            lead = x.shape[:-1]
            k = x.shape[-1]
            flat = reshape(x, (-1, 1, k))
            ker = Tensor(self.kernel.reshape(1, 1, -1))
            return reshape(conv1d(flat, ker, padding_mode="replicate"), lead + (k,))
        out = x
        if self.scale is not None:
            out = mul(out, Tensor(self.scale))
        if self.offset is not None:
            out = add(out, Tensor(self.offset))
        return out


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized Gaussian taps centred at ``(kernel_size - 1) / 2``."""
    if kernel_size < 1:
        raise ConfigError("kernel_size must be >= 1")
    offsets = np.arange(kernel_size) - (kernel_size - 1) / 2.0
    if sigma == 0:
        w = (np.abs(offsets) == np.abs(offsets).min()).astype(np.float64)
    else:
        w = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def smooth_with_kernel(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[-1]
    if kernel.size > k:
        raise ConfigError(f"kernel_size {kernel.size} exceeds series length {k}")
    flat = Tensor(x.reshape(-1, 1, k))
    out = conv1d(flat, Tensor(kernel.reshape(1, 1, -1)), padding_mode="replicate")
    return out.data.reshape(x.shape)


def _segment_mask(shape: tuple[int, ...], cfg: SegmentZeroConfig, rng: np.random.Generator) -> np.ndarray:
    k = shape[-1]
    max_len = _round_half_up(cfg.max_segment_length * k)
    if max_len < 1:
        raise ConfigError(f"max_segment_length * k rounds to 0 for k={k}")
    max_len = min(max_len, k)
    target = _round_half_up(cfg.total_zero_length * k)
    rows = int(np.prod(shape[:-1], dtype=np.int64))
    if target == 0:
        return np.ones(shape)
    # at most `target` draws are ever needed since every length is >= 1
    lengths = rng.integers(1, max_len + 1, size=(rows, target))
    starts = rng.integers(0, k - lengths + 1)
    reached = np.cumsum(lengths, axis=1) >= target
    n_draws = reached.argmax(axis=1) + 1
    used = np.arange(target)[None, :] < n_draws[:, None]
    edges = np.zeros((rows, k + 1))
    r_idx = np.broadcast_to(np.arange(rows)[:, None], lengths.shape)
    np.add.at(edges, (r_idx[used], starts[used]), 1.0)
    np.add.at(edges, (r_idx[used], (starts + lengths)[used]), -1.0)
    covered = np.cumsum(edges, axis=1)[:, :k] > 0
    return np.where(covered, 0.0, 1.0).reshape(shape)


def segment_draws(k: int, cfg: SegmentZeroConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    """The (start, length) pairs a single-series SegmentZero call would draw.

    Consumes the generator exactly as :func:`segment_zero` does on one series.
    """
    max_len = min(_round_half_up(cfg.max_segment_length * k), k)
    if max_len < 1:
        raise ConfigError(f"max_segment_length * k rounds to 0 for k={k}")
    target = _round_half_up(cfg.total_zero_length * k)
    if target == 0:
        return []
    lengths = rng.integers(1, max_len + 1, size=(1, target))
    starts = rng.integers(0, k - lengths + 1)
    n = int((np.cumsum(lengths[0]) >= target).argmax()) + 1
    return [(int(s), int(l)) for s, l in zip(starts[0, :n], lengths[0, :n])]


def sample_transform(
    method: AugmentMethod,
    shape: tuple[int, ...],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Transform:
    """Draw the randomness for one application of ``method`` to an array of ``shape``."""
    method = AugmentMethod(method)
    if method is AugmentMethod.JITTER:
        mask = rng.random(shape) < cfg.jitter.p_j
        noise = rng.uniform(-1.0, 1.0, shape) * cfg.jitter.noise_level
        return Transform(method, offset=np.where(mask, noise, 0.0))
    if method is AugmentMethod.RANDOM_ZERO:
        mask = rng.random(shape) < cfg.random_zero.p_r
        return Transform(method, scale=1.0 - mask)
    if method is AugmentMethod.SEGMENT_ZERO:
        return Transform(method, scale=_segment_mask(shape, cfg.segment_zero, rng))
    if method is AugmentMethod.GAUSSIAN_NOISE:
        g = cfg.gaussian_noise
        return Transform(method, offset=rng.normal(g.mu, g.sigma_g, shape))
    if method is AugmentMethod.SMOOTH:
        if cfg.smooth.kernel_size > shape[-1]:
            raise ConfigError(f"kernel_size {cfg.smooth.kernel_size} exceeds series length {shape[-1]}")
        return Transform(method, kernel=gaussian_kernel(cfg.smooth.kernel_size, cfg.smooth.sigma_s))
    return Transform(method)


# series-level API ---------------------------------------------------------


def jitter(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_transform(AugmentMethod.JITTER, x.shape, cfg, rng).apply_array(x)


def random_zero(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_transform(AugmentMethod.RANDOM_ZERO, x.shape, cfg, rng).apply_array(x)


def segment_zero(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_transform(AugmentMethod.SEGMENT_ZERO, x.shape, cfg, rng).apply_array(x)


def gaussian_noise(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_transform(AugmentMethod.GAUSSIAN_NOISE, x.shape, cfg, rng).apply_array(x)


def smooth(x, cfg: AugmentConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.smooth.kernel_size > x.shape[-1]:
        raise ConfigError(f"kernel_size {cfg.smooth.kernel_size} exceeds series length {x.shape[-1]}")
    return smooth_with_kernel(x, gaussian_kernel(cfg.smooth.kernel_size, cfg.smooth.sigma_s))


def apply_method(method: AugmentMethod, x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sample_transform(method, x.shape, cfg, rng).apply_array(x)


def sd_select(rng: np.random.Generator, methods: Sequence[AugmentMethod] = ALL_METHODS) -> AugmentMethod:
    """Uniform draw over ``methods`` (the five augmentations plus None by default)."""
    return methods[int(rng.integers(len(methods)))]


def sd_apply(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return apply_method(sd_select(rng), x, cfg, rng)


# front layers -------------------------------------------------------------


class AugmentLayer:
    """A single augmentation method used as the classifier's first layer.

    ``test_time`` keeps the layer active at inference; when False the layer is
    an identity outside training.
    """

    def __init__(self, method: AugmentMethod, cfg: Optional[AugmentConfig] = None, test_time: bool = True):
        self.method = AugmentMethod(method)
        self.cfg = cfg or AugmentConfig()
        self.test_time = test_time
        self.last_method: Optional[AugmentMethod] = None

    @property
    def stochastic(self) -> bool:
        return self.method not in (AugmentMethod.SMOOTH, AugmentMethod.NONE)

    def start_epoch(self, rng: np.random.Generator) -> None:
        pass

    def choose(self, rng: np.random.Generator) -> AugmentMethod:
        return self.method

    def __call__(self, x: Tensor, rng: np.random.Generator, train_mode: bool = False) -> Tensor:
        if not (train_mode or self.test_time):
            return x
        method = self.choose(rng)
        self.last_method = method
        if method is AugmentMethod.NONE:
            return x
        return sample_transform(method, x.shape, self.cfg, rng).apply_tensor(x)

    def to_dict(self) -> dict:
        return {"kind": "single", "method": self.method.value, "test_time": self.test_time,
                "augment": self.cfg.to_dict()}


class ShuffleLayer(AugmentLayer):
    """Picks a method uniformly from ``methods`` on every forward call.

    With ``per_epoch=True`` the pick is made once per training epoch instead
    (inference calls still draw per call). ``log`` records the method applied
    on every call.
    """

    def __init__(
        self,
        cfg: Optional[AugmentConfig] = None,
        methods: Sequence[AugmentMethod] = ALL_METHODS,
        per_epoch: bool = False,
        test_time: bool = True,
    ):
        super().__init__(AugmentMethod.NONE, cfg, test_time)
        self.methods = tuple(AugmentMethod(m) for m in methods)
        self.per_epoch = per_epoch
        self.log: list[AugmentMethod] = []
        self._epoch_method: Optional[AugmentMethod] = None
        self._in_training = False

    @property
    def stochastic(self) -> bool:
        return len(self.methods) > 1 or any(
            m not in (AugmentMethod.SMOOTH, AugmentMethod.NONE) for m in self.methods
        )

    def start_epoch(self, rng: np.random.Generator) -> None:
        self._epoch_method = sd_select(rng, self.methods) if self.per_epoch else None

    def __call__(self, x: Tensor, rng: np.random.Generator, train_mode: bool = False) -> Tensor:
        self._in_training = train_mode
        return super().__call__(x, rng, train_mode)

    def choose(self, rng: np.random.Generator) -> AugmentMethod:
        if self.per_epoch and self._in_training and self._epoch_method is not None:
            method = self._epoch_method
        else:
            method = sd_select(rng, self.methods)
        self.log.append(method)
        return method

    def to_dict(self) -> dict:
        return {"kind": "shuffle", "methods": [m.value for m in self.methods], "per_epoch": self.per_epoch,
                "test_time": self.test_time, "augment": self.cfg.to_dict()}


def layer_from_dict(d: Optional[dict]) -> Optional[AugmentLayer]:
    if not d:
        return None
    cfg = AugmentConfig.from_dict(d.get("augment"))
    if d["kind"] == "shuffle":
        return ShuffleLayer(cfg, [AugmentMethod(m) for m in d["methods"]], d.get("per_epoch", False),
                            d.get("test_time", True))
    return AugmentLayer(AugmentMethod(d["method"]), cfg, d.get("test_time", True))
