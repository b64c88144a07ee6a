"""Metrics, the defense x attack experiment matrix, and report emission."""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackMethod, AttackSpec, run_attack
from .augment import AugmentConfig, AugmentMethod
from .data import ConfigError, Dataset, load_ucr_tsv, synth_two_class, z_normalize
from .defenses import EnsembleModel, train_ad, train_at, train_dd, train_sd, train_sdam
from .model import Classifier, ClassifierConfig, TrainConfig

log = logging.getLogger(__name__)

DEFENSES: tuple[str, ...] = ("none", "jitter", "rz", "sz", "noise", "smooth", "sd", "ad", "at", "dd")
SDAM_BY_NAME = {
    "none": AugmentMethod.NONE,
    "jitter": AugmentMethod.JITTER,
    "rz": AugmentMethod.RANDOM_ZERO,
    "sz": AugmentMethod.SEGMENT_ZERO,
    "noise": AugmentMethod.GAUSSIAN_NOISE,
    "smooth": AugmentMethod.SMOOTH,
}
SEED_ENV = "TSROBUST_SEED"


# ---------------------------------------------------------------- metrics


def _labels(test: Dataset) -> np.ndarray:
    if test.n == 0:
        raise ValueError("test set is empty")
    return test.labels


def natural_accuracy(model, test: Dataset, repeats: int = 5, rng: Optional[np.random.Generator] = None) -> float:
    """Fraction of samples whose repeats-averaged prediction matches the label."""
    y = _labels(test)
    return float(np.mean(model.predict(test.series, repeats, rng) == y))


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class absent from both truth and predictions scores 1; a class that is
    never predicted but does occur scores 0.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} has labels outside [0, {n_classes})")
    tp = np.bincount(y_true[y_true == y_pred], minlength=n_classes).astype(np.float64)
    support = np.bincount(y_true, minlength=n_classes)
    predicted = np.bincount(y_pred, minlength=n_classes)
    denom = support + predicted
    # 2PR/(P+R) simplifies to 2TP/(support + predicted)
    f1 = np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))
    return float(f1.mean())


def attack_dataset(model, test: Dataset, spec: AttackSpec) -> Dataset:
    """The test set with every series replaced by its adversarial version."""
    batch = run_attack(model, test.series, _labels(test), spec)
    return Dataset(batch.perturbed, test.labels, test.n_classes, test.split, test.name)


def robust_accuracy(
    model,
    test: Dataset,
    spec: AttackSpec,
    repeats: int = 5,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Natural accuracy on the attacked test set."""
    return natural_accuracy(model, attack_dataset(model, test, spec), repeats, rng)


# ---------------------------------------------------------------- config


@dataclass
class BenchConfig:
    """Everything that determines a bench run; reported numbers depend on nothing else."""

    data: str = "synth"
    n_per_class: int = 100
    length: int = 128
    defenses: list[str] = field(default_factory=lambda: ["none", "sd", "ad", "at", "dd"])
    attacks: list[str] = field(default_factory=lambda: ["fgsm", "pgd"])
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    repeats: int = 5
    sd_per_epoch: bool = False
    parallel_cells: int = 1
    at_pgd_steps: int = 40
    dd_temperature: float = 10.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # AttackSpec fields other than method and seed; iterations default to the desk-scale 100
    attack: dict = field(default_factory=lambda: {"iterations": 100})

    def __post_init__(self):
        if isinstance(self.defenses, str):
            self.defenses = [self.defenses]
        if isinstance(self.attacks, str):
            self.attacks = [self.attacks]
        self.defenses = [str(d).lower() for d in self.defenses]
        self.attacks = [AttackMethod(a).value for a in self.attacks]
        unknown = [d for d in self.defenses if d not in DEFENSES]
        if unknown:
            raise ConfigError(f"unknown defense(s) {unknown}; choose from {list(DEFENSES)}")
        if len(set(self.defenses)) != len(self.defenses) or len(set(self.attacks)) != len(self.attacks):
            raise ConfigError("defenses and attacks must not repeat")
        if self.repeats < 1 or self.parallel_cells < 1:
            raise ConfigError("repeats and parallel_cells must be >= 1")
        if isinstance(self.augment, dict) or self.augment is None:
            self.augment = AugmentConfig.from_dict(self.augment)
        self.attack = dict(self.attack or {})
        bad = set(self.attack) - {f.name for f in fields(AttackSpec)} | ({"method", "seed"} & set(self.attack))
        if bad:
            raise ConfigError(f"unsupported attack block keys {sorted(bad)}")
        self.attack_spec("pgd", 0)  # validates the block
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, seed=self.seed)

    def attack_spec(self, method: str, seed: int) -> AttackSpec:
        return AttackSpec(method=method, seed=seed, **self.attack)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        # normalized through JSON so snapshots compare equal after a reload
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        # "defense"/"attack" as scalars mirror the single-valued CLI flags
        if "defense" in d:
            d["defenses"] = d.pop("defense")
        if "attack" in d and not isinstance(d["attack"], dict):
            d["attacks"] = d.pop("attack")
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> BenchConfig:
    """Read a JSON config; ``TSROBUST_SEED`` then explicit overrides take precedence."""
    env = os.environ if env is None else env
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if env.get(SEED_ENV):
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return BenchConfig.from_dict(d)


def load_data(cfg: BenchConfig) -> tuple[Dataset, Dataset]:
    """Synthetic desk data, or a UCR train file whose test twin swaps TRAIN for TEST.

    A directory is searched for ``*_TRAIN.tsv``. Both splits are z-normalized.
    """
    if cfg.data == "synth":
        return synth_two_class(cfg.n_per_class, cfg.length, cfg.seed)
    path = Path(cfg.data)
    if path.is_dir():
        found = sorted(path.glob("*_TRAIN.tsv"))
        if len(found) != 1:
            raise ConfigError(f"{path}: expected exactly one *_TRAIN.tsv, found {len(found)}")
        path = found[0]
    if "TRAIN" not in path.name:
        raise ConfigError(f"{path}: file name must contain TRAIN so the TEST split can be located")
    test_path = path.with_name(path.name.replace("TRAIN", "TEST"))
    train = load_ucr_tsv(path, "train")
    test = load_ucr_tsv(test_path, "test")
    if test.length != train.length:
        raise ConfigError("train and test series lengths differ")
    # classes are re-indexed per file, so both splits must carry the same label set
    n = max(train.n_classes, test.n_classes)
    name = path.name.replace("_TRAIN.tsv", "").replace(".tsv", "")
    train = Dataset(train.series, train.labels, n, "train", name)
    test = Dataset(test.series, test.labels, n, "test", name)
    return z_normalize(train), z_normalize(test)


# ---------------------------------------------------------------- defenses


def build_defense(name: str, cfg: BenchConfig, train_ds: Dataset):
    """Train the named defense. Returns the model and training wall-clock seconds."""
    base = ClassifierConfig(n_classes=train_ds.n_classes)
    tc = cfg.train_config()
    t0 = time.perf_counter()
    if name in SDAM_BY_NAME:
        model, _ = train_sdam(base, SDAM_BY_NAME[name], train_ds, tc, cfg.augment)
    elif name == "sd":
        model, _ = train_sd(base, train_ds, tc, cfg.augment, per_epoch=cfg.sd_per_epoch)
    elif name == "ad":
        model, _ = train_ad(base, train_ds, tc, cfg.augment)
    elif name == "at":
        eps = cfg.attack.get("epsilon", AttackSpec.epsilon)
        model, _ = train_at(base, train_ds, tc, pgd_steps=cfg.at_pgd_steps, epsilon=eps)
    elif name == "dd":
        model, _ = train_dd(base, train_ds, tc, temperature=cfg.dd_temperature)
    else:
        raise ConfigError(f"unknown defense {name!r}")
    return model, time.perf_counter() - t0


def save_model(model, path) -> Path:
    """Write a classifier to ``path.json`` or an ensemble manifest under ``path/``."""
    path = Path(path)
    if isinstance(model, EnsembleModel):
        return model.save(path)
    out = path.with_suffix(".json")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    return out


def load_model(path):
    """Load either checkpoint kind, dispatching on the stored format tag."""
    path = Path(path)
    if path.is_dir():
        path = path / "ensemble.json"
    fmt = json.loads(path.read_text()).get("format")
    if fmt == "tsrobust-ensemble":
        return EnsembleModel.load(path)
    return Classifier.load(path)


# ---------------------------------------------------------------- matrix


@dataclass
class EvalReport:
    dataset: str
    defense: str
    NA: Optional[float]
    F1: Optional[float]
    RA: dict
    train_seconds: Optional[float]
    repeats: int
    seed: int
    config: dict
    error: Optional[str] = None
    timings_comparable: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _cell_rng_seed(seed: int, defense: str, stream: int) -> int:
    """Seed for one stream of one cell; independent of config order."""
    ss = np.random.SeedSequence([seed, DEFENSES.index(defense), stream])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def evaluate(model, defense: str, test: Dataset, cfg: BenchConfig, seconds: float) -> EvalReport:
    # stream 0 scores natural accuracy; attack i gets streams 2i+1 (crafting) and 2i+2 (scoring)
    rng = np.random.default_rng(_cell_rng_seed(cfg.seed, defense, 0))
    pred = model.predict(test.series, cfg.repeats, rng)
    na = float(np.mean(pred == test.labels))
    f1 = macro_f1(test.labels, pred, test.n_classes)
    ra = {}
    for a in cfg.attacks:
        i = list(AttackMethod).index(AttackMethod(a))
        spec = cfg.attack_spec(a, _cell_rng_seed(cfg.seed, defense, 2 * i + 1))
        score_rng = np.random.default_rng(_cell_rng_seed(cfg.seed, defense, 2 * i + 2))
        ra[a] = robust_accuracy(model, test, spec, cfg.repeats, score_rng)
    return EvalReport(test.name, defense, na, f1, ra, seconds, cfg.repeats, cfg.seed, cfg.to_dict(),
                      timings_comparable=cfg.parallel_cells == 1)


def run_cell(cfg: BenchConfig, defense: str, out_dir=None, data=None) -> EvalReport:
    """Train, time and evaluate one defense; failures become an error report."""
    cell_path = Path(out_dir) / "cells" / f"{defense}.json" if out_dir is not None else None
    if cell_path is not None and cell_path.exists():
        cached = EvalReport.from_dict(json.loads(cell_path.read_text()))
        if cached.error is None and cached.config == cfg.to_dict():
            log.info("cell %s: reusing %s", defense, cell_path)
            return cached
    try:
        train_ds, test_ds = data if data is not None else load_data(cfg)
        log.info("cell %s: training", defense)
        model, seconds = build_defense(defense, cfg, train_ds)
        if out_dir is not None:
            save_model(model, Path(out_dir) / "models" / defense)
        report = evaluate(model, defense, test_ds, cfg, seconds)
    except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the matrix
        log.error("cell %s failed: %s", defense, exc)
        name = data[1].name if data is not None else str(cfg.data)
        report = EvalReport(name, defense, None, None, {a: None for a in cfg.attacks}, None,
                            cfg.repeats, cfg.seed, cfg.to_dict(),
                            error="".join(traceback.format_exception_only(type(exc), exc)).strip(),
                            timings_comparable=cfg.parallel_cells == 1)
    if cell_path is not None:
        cell_path.parent.mkdir(parents=True, exist_ok=True)
        cell_path.write_text(json.dumps(report.to_dict(), indent=1))
    return report


def _run_cell_worker(cfg_dict: dict, defense: str, out_dir) -> dict:
    return run_cell(BenchConfig.from_dict(cfg_dict), defense, out_dir).to_dict()


def run_matrix(cfg: BenchConfig, out_dir=None) -> list[EvalReport]:
    """One report per configured defense, in config order.

    With ``out_dir`` every finished cell is checkpointed and reused on rerun.
    Cells run one at a time unless ``parallel_cells`` > 1, in which case the
    reports are flagged as having non-comparable timings.
    """
    if cfg.parallel_cells == 1:
        data = load_data(cfg)
        return [run_cell(cfg, d, out_dir, data) for d in cfg.defenses]
    with concurrent.futures.ProcessPoolExecutor(cfg.parallel_cells) as pool:
        futures = [pool.submit(_run_cell_worker, cfg.to_dict(), d, out_dir) for d in cfg.defenses]
        return [EvalReport.from_dict(f.result()) for f in futures]


# ---------------------------------------------------------------- reports


def summary_rows(reports: Sequence[EvalReport], attacks: Optional[Sequence[str]] = None):
    """Header and rows of the combined table: defense, NA, F1, Time, RA per attack."""
    if attacks is None:
        attacks = list(reports[0].RA) if reports else []
    header = ["defense", "NA", "F1", "Time"] + [f"RA_{a}" for a in attacks]
    rows = [[r.defense, r.NA, r.F1, r.train_seconds] + [r.RA.get(a) for a in attacks] for r in reports]
    return header, rows


def emit_report(reports: Sequence[EvalReport], fmt: str, path, attacks: Optional[Sequence[str]] = None) -> Path:
    """Write reports as a JSON array of report objects or as a CSV table."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps([r.to_dict() for r in reports], indent=1))
    elif fmt == "csv":
        header, rows = summary_rows(reports, attacks)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path


def read_reports(path) -> list[EvalReport]:
    """Reports from a JSON report file or from the cell checkpoints of an output directory."""
    path = Path(path)
    if path.is_dir():
        cells = path / "cells"
        reports = [EvalReport.from_dict(json.loads(p.read_text())) for p in sorted(cells.glob("*.json"))]
        # keep the configured defense order rather than file-name order
        return sorted(reports, key=lambda r: DEFENSES.index(r.defense))
    return [EvalReport.from_dict(d) for d in json.loads(path.read_text())]


def format_table(reports: Sequence[EvalReport]) -> str:
    header, rows = summary_rows(reports)

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.1f}" if math.isfinite(v) and abs(v) >= 10 else f"{v:.3f}"
        return str(v)

    table = [header] + [[cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(s.ljust(w) for s, w in zip(r, widths)) for r in table)
