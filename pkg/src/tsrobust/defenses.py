"""Defenses built from the classifier: augmentation front layers, the shuffle
and averaging combinations, PGD adversarial training and defensive distillation."""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackSpec, pgd
from .augment import ALL_METHODS, AugmentConfig, AugmentLayer, AugmentMethod, ShuffleLayer
from .data import ConfigError, Dataset
from .model import Classifier, ClassifierConfig, TrainConfig, TrainResult, train
from .tensor import Tensor, log, stack_mean

# base order for the averaging ensemble; index i is trained with seed master ^ i
AD_METHODS: tuple[AugmentMethod, ...] = (
    AugmentMethod.NONE,
    AugmentMethod.JITTER,
    AugmentMethod.RANDOM_ZERO,
    AugmentMethod.SEGMENT_ZERO,
    AugmentMethod.GAUSSIAN_NOISE,
    AugmentMethod.SMOOTH,
)

MANIFEST_FORMAT = "tsrobust-ensemble"


class EnsembleModel:
    """Averages the softmax outputs of independently trained base classifiers."""

    def __init__(self, bases: Sequence[Classifier], seeds: Optional[Sequence[int]] = None):
        bases = list(bases)
        if len(bases) < 2:
            raise ConfigError("an ensemble needs at least two bases")
        c, k = bases[0].n_classes, bases[0].input_length
        if any(b.n_classes != c or b.input_length != k for b in bases):
            raise ConfigError("ensemble bases must share class count and input length")
        self.bases = bases
        self.seeds = list(seeds) if seeds is not None else [b.seed for b in bases]
        self.train_seconds = 0.0

    @property
    def n_classes(self) -> int:
        return self.bases[0].n_classes

    @property
    def input_length(self) -> int:
        return self.bases[0].input_length

    @property
    def stochastic(self) -> bool:
        return any(b.stochastic for b in self.bases)

    @contextlib.contextmanager
    def frozen(self):
        with contextlib.ExitStack() as stack:
            for b in self.bases:
                stack.enter_context(b.frozen())
            yield self

    def _rngs(self, rng: Optional[np.random.Generator]):
        if rng is None:
            return [None] * len(self.bases)
        return rng.spawn(len(self.bases))

    def forward(self, X, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return stack_mean([b.forward(X, train_mode, r) for b, r in zip(self.bases, self._rngs(rng))])

    __call__ = forward

    def logits(self, X, train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        # log of the averaged probabilities; softmax of these recovers the average
        return log(self.forward(X, train_mode, rng))

    def predict_proba(self, X, repeats: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.mean([b.predict_proba(X, repeats, r) for b, r in zip(self.bases, self._rngs(rng))], axis=0)

    def predict(self, X, repeats: int = 1, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return self.predict_proba(X, repeats, rng).argmax(axis=1)

    def save(self, directory) -> Path:
        """Write one checkpoint per base plus a manifest referencing them."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, b in enumerate(self.bases):
            name = f"base{i}.json"
            b.save(directory / name)
            files.append(name)
        manifest = directory / "ensemble.json"
        manifest.write_text(json.dumps({"format": MANIFEST_FORMAT, "version": 1, "bases": files,
                                        "seeds": self.seeds, "train_seconds": self.train_seconds}))
        return manifest

    @classmethod
    def load(cls, manifest) -> "EnsembleModel":
        manifest = Path(manifest)
        d = json.loads(manifest.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{manifest} is not an ensemble manifest")
        e = cls([Classifier.load(manifest.parent / f) for f in d["bases"]], d["seeds"])
        e.train_seconds = d.get("train_seconds", 0.0)
        return e


def ad_predict(e: EnsembleModel, X, repeats: int = 1, rng: Optional[np.random.Generator] = None):
    """Class indices and averaged probabilities of the ensemble."""
    probs = e.predict_proba(X, repeats, rng)
    return probs.argmax(axis=1), probs


def train_sdam(
    base_cfg: ClassifierConfig,
    method: AugmentMethod,
    d: Dataset,
    tc: TrainConfig,
    augment: Optional[AugmentConfig] = None,
) -> tuple[Classifier, TrainResult]:
    """Train a classifier with a single augmentation method as its front layer.

    ``AugmentMethod.NONE`` gives the plain, undefended classifier.
    """
    method = AugmentMethod(method)
    front = None if method is AugmentMethod.NONE else AugmentLayer(method, augment)
    model = Classifier(base_cfg, d.length, seed=tc.seed, front=front)
    return model, train(model, d, tc)


def train_sd(
    base_cfg: ClassifierConfig,
    d: Dataset,
    tc: TrainConfig,
    augment: Optional[AugmentConfig] = None,
    per_epoch: bool = False,
    methods: Sequence[AugmentMethod] = ALL_METHODS,
) -> tuple[Classifier, TrainResult]:
    """Train behind a layer that draws one of the six methods on every forward call."""
    front = ShuffleLayer(augment, methods=methods, per_epoch=per_epoch)
    model = Classifier(base_cfg, d.length, seed=tc.seed, front=front)
    return model, train(model, d, tc)


def train_ad(
    base_cfg: ClassifierConfig,
    d: Dataset,
    tc: TrainConfig,
    augment: Optional[AugmentConfig] = None,
) -> tuple[EnsembleModel, list[TrainResult]]:
    """Six independent SDAM trainings (None included) with seeds ``master ^ i``."""
    bases, results, seeds = [], [], []
    for i, method in enumerate(AD_METHODS):
        seed = tc.seed ^ i
        model, result = train_sdam(base_cfg, method, d, replace(tc, seed=seed), augment)
        bases.append(model)
        results.append(result)
        seeds.append(seed)
    ensemble = EnsembleModel(bases, seeds)
    ensemble.train_seconds = sum(r.seconds for r in results)
    return ensemble, results


def train_at(
    base_cfg: ClassifierConfig,
    d: Dataset,
    tc: TrainConfig,
    pgd_steps: int = 40,
    epsilon: float = 0.1,
    step_size: Optional[float] = None,
) -> tuple[Classifier, TrainResult]:
    """Adversarial training on natural plus PGD adversarial samples, 1:1 per batch.

    Twins are crafted against the current parameters before every step. The
    default PGD step is ``2.5 * epsilon / pgd_steps`` so the inner loop can
    reach the boundary of the budget.
    """
    if pgd_steps < 0:
        raise ConfigError("pgd_steps must be >= 0")
    step = step_size if step_size is not None else 2.5 * epsilon / max(pgd_steps, 1)

    def twins(model, xb, yb, rng):
        if pgd_steps == 0:
            adv = xb
        else:
            spec = AttackSpec("pgd", epsilon=epsilon, iterations=pgd_steps, step_size=step,
                              seed=int(rng.integers(2**63)))
            adv = pgd(model, xb, yb, spec).perturbed
        return np.concatenate([xb, adv]), np.concatenate([yb, yb])

    model = Classifier(base_cfg, d.length, seed=tc.seed)
    return model, train(model, d, tc, batch_hook=twins)


@dataclass
class DistillResult:
    teacher: Classifier
    soft_targets: np.ndarray
    teacher_result: TrainResult
    student_result: TrainResult

    @property
    def seconds(self) -> float:
        return self.teacher_result.seconds + self.student_result.seconds


def train_dd(
    base_cfg: ClassifierConfig,
    d: Dataset,
    tc: TrainConfig,
    temperature: float = 10.0,
) -> tuple[Classifier, DistillResult]:
    """Defensive distillation.

    The teacher trains at ``temperature`` on hard labels; the student (same
    architecture, independent seed) trains at the same temperature on the
    teacher's softened outputs and is returned set to temperature 1. Both
    losses are scaled by ``temperature``, which offsets the ``1/T`` shrinkage
    of the logit gradients; the full ``T**2`` correction diverges at this
    learning rate.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    hot = replace(base_cfg, temperature=temperature)
    teacher = Classifier(hot, d.length, seed=tc.seed)
    scale = temperature
    t_result = train(teacher, d, tc, loss_scale=scale)
    soft = teacher.predict_proba(d.series)
    student_seed = tc.seed ^ 0x5EED
    student = Classifier(replace(base_cfg, temperature=temperature), d.length, seed=student_seed)
    s_result = train(student, d, replace(tc, seed=student_seed), soft_targets=soft, loss_scale=scale)
    student.config = replace(student.config, temperature=1.0)
    return student, DistillResult(teacher, soft, t_result, s_result)


@dataclass
class VarianceDiagnostic:
    """Per-sample output variance and true-class bias of an ensemble and its bases.

    Variances are summed over output coordinates. Bias is the mean
    true-class probability minus one.
    """

    ensemble_variance: np.ndarray  # [S]
    base_variances: np.ndarray  # [S, N]
    ensemble_bias: np.ndarray  # [S]
    base_biases: np.ndarray  # [S, N]
    ensemble_bias_se: np.ndarray  # [S]
    trials: int

    @property
    def mean_base_variance(self) -> np.ndarray:
        return self.base_variances.mean(axis=1)

    @property
    def mean_base_bias(self) -> np.ndarray:
        return self.base_biases.mean(axis=1)


def variance_diagnostic(
    e: EnsembleModel,
    X,
    Y,
    trials: int = 1000,
    seed: int = 0,
) -> VarianceDiagnostic:
    """Monte-Carlo variance/bias of each base and of their average.

    For every sample each base runs ``trials`` stochastic forward passes; the
    ensemble output of trial ``t`` is the mean of the bases' trial-``t``
    outputs, so base and ensemble statistics come from the same draws.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.int64).reshape(-1)
    rng = np.random.default_rng(seed)
    n_s, n_b = X.shape[0], len(e.bases)
    ens_var, ens_bias, ens_se = np.zeros(n_s), np.zeros(n_s), np.zeros(n_s)
    base_var, base_bias = np.zeros((n_s, n_b)), np.zeros((n_s, n_b))
    for s in range(n_s):
        reps = np.repeat(X[s:s + 1], trials, axis=0)
        outs = np.stack([
            b.forward(reps, rng=r).data if b.stochastic
            # one pass suffices; batching identical rows would only add rounding noise
            else np.repeat(b.forward(X[s:s + 1]).data, trials, axis=0)
            for b, r in zip(e.bases, rng.spawn(n_b))
        ])
        # shifting by the first trial leaves the variance unchanged and keeps constant outputs at exactly 0
        base_var[s] = (outs - outs[:, :1]).var(axis=1, ddof=1).sum(axis=1)
        base_bias[s] = outs[:, :, Y[s]].mean(axis=1) - 1.0
        ens = outs.mean(axis=0)
        ens_var[s] = (ens - ens[:1]).var(axis=0, ddof=1).sum()
        ens_bias[s] = ens[:, Y[s]].mean() - 1.0
        ens_se[s] = ens[:, Y[s]].std(ddof=1) / np.sqrt(trials)
    return VarianceDiagnostic(ens_var, base_var, ens_bias, base_bias, ens_se, trials)


def time_training(fn, *args, **kwargs):
    """Run ``fn`` and return its result with the elapsed wall-clock seconds."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
