"""White-box gradient attacks under an l-infinity perturbation budget.

All attacks take gradients with respect to the perturbation itself. For
models with a randomized front layer every gradient evaluation draws a fresh
augmentation, so the attacker always sees the previous call's randomness,
never the one used to score the final example.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .data import ConfigError
from .tensor import Tensor, add, backward, cross_entropy, gather, neg, relu, square, tsum


class AttackError(RuntimeError):
    pass


class AttackMethod(str, enum.Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"
    GM = "gm"
    SWAP = "swap"
    CW = "cw"


FGSM_STEP = 0.1
# 0.0005 per step at 1000 iterations; fewer iterations keep the same total path
ITERATIVE_PATH = 0.5


def default_step(method: AttackMethod, iterations: int) -> float:
    if AttackMethod(method) is AttackMethod.FGSM:
        return FGSM_STEP
    return ITERATIVE_PATH / max(iterations, 1)


@dataclass
class AttackSpec:
    method: AttackMethod = AttackMethod.PGD
    epsilon: float = 0.1
    init_span: float = 0.001
    iterations: int = 1000
    step_size: Optional[float] = None
    swap_gap: float = 0.02
    cw_c: float = 1e-5
    gm_lambda: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.method = AttackMethod(self.method)
        if self.step_size is None:
            self.step_size = default_step(self.method, self.iterations)
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 <= self.init_span <= self.epsilon:
            raise ConfigError(f"init_span must lie in [0, epsilon], got {self.init_span}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    delta: np.ndarray
    success: np.ndarray
    iterations: np.ndarray


def clip_delta(delta, epsilon: float) -> np.ndarray:
    """Project onto the l-infinity ball of radius ``epsilon``."""
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon)


def random_init(shape, init_span: float, rng: np.random.Generator) -> np.ndarray:
    if init_span < 0:
        raise ConfigError("init_span must be non-negative")
    if init_span == 0:
        return np.zeros(shape)
    return rng.uniform(-init_span, init_span, shape)


def roughness(delta: np.ndarray) -> np.ndarray:
    """Sum of squared first differences along time, per sample."""
    d = np.atleast_2d(delta)
    return np.square(np.diff(d, axis=-1)).sum(axis=-1)


def _runner_up(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    masked = z.copy()
    masked[np.arange(z.shape[0]), labels] = -np.inf
    return masked.argmax(axis=1)


Objective = Callable[[Tensor, Tensor], Tensor]


def _grad(model, X: np.ndarray, delta: np.ndarray, objective, rng) -> tuple[np.ndarray, Tensor]:
    """Gradient of ``objective(logits_or_probs, delta)`` with respect to ``delta``."""
    d = Tensor(delta, requires_grad=True)
    value = objective(model, add(Tensor(X), d), d, rng)
    backward(value)
    g = d.grad if d.grad is not None else np.zeros_like(delta)
    bad = ~np.all(np.isfinite(g), axis=1)
    if bad.any():
        raise AttackError(f"non-finite gradient for sample {int(np.flatnonzero(bad)[0])}")
    return g, value


def _ce_objective(labels):
    def objective(model, x, d, rng):
        return cross_entropy(model.forward(x, rng=rng), labels, reduction="sum")
    return objective


def _finish(model, X, Y, delta, spec, rng, iterations) -> AdversarialBatch:
    delta = clip_delta(delta, spec.epsilon)
    Xp = X + delta
    pred = model.forward(Xp, rng=rng).data.argmax(axis=1)
    return AdversarialBatch(
        original=X,
        perturbed=Xp,
        delta=delta,
        success=pred != Y,
        iterations=np.broadcast_to(np.asarray(iterations), (X.shape[0],)).astype(np.int64),
    )


def _setup(X, Y, spec):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.int64).reshape(-1)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{Y.shape[0]} labels for {X.shape[0]} series")
    init_rng, model_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    return X, Y, init_rng, model_rng


def fgsm(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    X, Y, init_rng, rng = _setup(X, Y, spec)
    delta0 = random_init(X.shape, spec.init_span, init_rng)
    with model.frozen():
        g, _ = _grad(model, X, delta0, _ce_objective(Y), rng)
        delta = clip_delta(delta0 + spec.step_size * np.sign(g), spec.epsilon)
        return _finish(model, X, Y, delta, spec, rng, 1)


def _sign_ascent(model, X, Y, spec, delta, rng) -> AdversarialBatch:
    objective = _ce_objective(Y)
    with model.frozen():
        for _ in range(spec.iterations):
            g, _ = _grad(model, X, delta, objective, rng)
            delta = clip_delta(delta + spec.step_size * np.sign(g), spec.epsilon)
        return _finish(model, X, Y, delta, spec, rng, spec.iterations)


def bim(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    """Iterated sign steps from a zero start."""
    X, Y, _, rng = _setup(X, Y, spec)
    return _sign_ascent(model, X, Y, spec, np.zeros_like(X), rng)


def pgd(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    """Iterated sign steps from a uniform random start in ``±init_span``."""
    X, Y, init_rng, rng = _setup(X, Y, spec)
    delta0 = clip_delta(random_init(X.shape, spec.init_span, init_rng), spec.epsilon)
    return _sign_ascent(model, X, Y, spec, delta0, rng)


def gm(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    """Smooth attack: maximize loss minus ``gm_lambda`` times the perturbation roughness.

    Steps follow the full gradient rescaled so its largest entry moves by
    ``step_size``.
    """
    X, Y, init_rng, rng = _setup(X, Y, spec)
    lam = spec.gm_lambda

    def objective(model, x, d, rng):
        loss = cross_entropy(model.forward(x, rng=rng), Y, reduction="sum")
        if lam == 0:
            return loss
        diffs = add(d[:, 1:], neg(d[:, :-1]))
        return add(loss, neg(tsum(square(diffs)) * lam))

    delta = clip_delta(random_init(X.shape, spec.init_span, init_rng), spec.epsilon)
    with model.frozen():
        for _ in range(spec.iterations):
            g, _ = _grad(model, X, delta, objective, rng)
            scale = np.abs(g).max(axis=1, keepdims=True)
            step = np.divide(g, scale, out=np.zeros_like(g), where=scale > 0)
            delta = clip_delta(delta + spec.step_size * step, spec.epsilon)
        return _finish(model, X, Y, delta, spec, rng, spec.iterations)


def swap(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    """Push the strongest wrong-class logit above the true-class logit by ``swap_gap``.

    The runner-up class is re-chosen at every step. A sample stops as soon as
    its gap reaches ``swap_gap``, including before the first step.
    """
    if model.n_classes < 2:
        raise ConfigError("SWAP needs at least two classes")
    X, Y, init_rng, rng = _setup(X, Y, spec)
    delta = clip_delta(random_init(X.shape, spec.init_span, init_rng), spec.epsilon)
    used = np.zeros(X.shape[0], dtype=np.int64)
    active = np.ones(X.shape[0], dtype=bool)
    rows = np.arange(X.shape[0])
    with model.frozen():
        for _ in range(spec.iterations + 1):
            d = Tensor(delta, requires_grad=True)
            z = model.logits(add(Tensor(X), d), rng=rng)
            other = _runner_up(z.data, Y)
            gap = z.data[rows, other] - z.data[rows, Y]
            active &= gap < spec.swap_gap
            if not active.any() or used.max(initial=0) >= spec.iterations:
                break
            weights = Tensor(active.astype(np.float64))
            objective = tsum((gather(z, other) - gather(z, Y)) * weights)
            backward(objective)
            g = d.grad
            bad = active & ~np.all(np.isfinite(g), axis=1)
            if bad.any():
                raise AttackError(f"non-finite gradient for sample {int(np.flatnonzero(bad)[0])}")
            delta = np.where(active[:, None], clip_delta(delta + spec.step_size * np.sign(g), spec.epsilon), delta)
            used += active
        return _finish(model, X, Y, delta, spec, rng, used)


def cw(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    """Gradient descent on ``c * ||delta||_2^2 + max(z_true - max_other z, 0)``.

    ``cw_c`` weights the norm term. The learning rate is ``10 * step_size``. The lowest-objective iterate that
    misclassifies is kept per sample, otherwise the last iterate; the result is
    clipped to ``epsilon`` at the end.
    """
    X, Y, init_rng, rng = _setup(X, Y, spec)
    c = spec.cw_c
    lr = 10.0 * spec.step_size
    rows = np.arange(X.shape[0])
    delta = random_init(X.shape, spec.init_span, init_rng)
    best = delta.copy()
    best_obj = np.full(X.shape[0], np.inf)
    with model.frozen():
        for _ in range(spec.iterations):
            d = Tensor(delta, requires_grad=True)
            z = model.logits(add(Tensor(X), d), rng=rng)
            other = _runner_up(z.data, Y)
            margin = gather(z, Y) - gather(z, other)
            per_sample = tsum(square(d), axis=1) * c + relu(margin)
            obj = per_sample.data
            # relu maps NaN to 0, so the margin is checked separately
            bad = ~(np.isfinite(obj) & np.isfinite(margin.data))
            if bad.any():
                raise AttackError(f"non-finite objective for sample {int(np.flatnonzero(bad)[0])}")
            improved = (margin.data < 0) & (obj < best_obj)
            best[improved] = delta[improved]
            best_obj[improved] = obj[improved]
            backward(tsum(per_sample))
            delta = delta - lr * d.grad
        found = np.isfinite(best_obj)
        delta = np.where(found[:, None], best, delta)
        return _finish(model, X, Y, delta, spec, rng, spec.iterations)


ATTACKS = {
    AttackMethod.FGSM: fgsm,
    AttackMethod.BIM: bim,
    AttackMethod.PGD: pgd,
    AttackMethod.GM: gm,
    AttackMethod.SWAP: swap,
    AttackMethod.CW: cw,
}


def run_attack(model, X, Y, spec: AttackSpec) -> AdversarialBatch:
    return ATTACKS[AttackMethod(spec.method)](model, X, Y, spec)
