"""UCR-format loading, per-series z-normalization and a seeded synthetic set."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DatasetFormatError(ValueError):
    """A UCR file is malformed (ragged rows, bad tokens, empty)."""


class ConfigError(ValueError):
    """Generation parameters are out of range."""


@dataclass(frozen=True)
class Dataset:
    series: np.ndarray  # [n, k] float64
    labels: np.ndarray  # [n] int64 in [0, n_classes)
    n_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        # copies, so freezing them below never touches the caller's arrays
        series = np.array(self.series, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if series.ndim != 2:
            raise ValueError(f"series must be [n, k], got shape {series.shape}")
        if labels.shape != (series.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {series.shape[0]} series")
        if not np.all(np.isfinite(series)):
            raise ValueError("series contain NaN or Inf")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        series.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, idx) -> "Dataset":
        return replace(self, series=self.series[idx], labels=self.labels[idx])


def _parse_label(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise DatasetFormatError(f"line {lineno}: label {token!r} is not numeric") from None


def load_ucr_tsv(path, split: str = "train", n_classes: int | None = None) -> Dataset:
    """Read a UCR archive ``.tsv`` file.

    Raw labels are remapped to ``0..C-1`` in ascending order of their value.
    Pass ``n_classes`` when loading a test split whose label set may be a
    subset of the training one.
    """
    path = Path(path)
    rows: list[np.ndarray] = []
    raw_labels: list[float] = []
    k = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            label = _parse_label(fields[0], lineno)
            try:
                values = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from None
            if k is None:
                k = values.size
                if k == 0:
                    raise DatasetFormatError(f"line {lineno}: record has no values")
            elif values.size != k:
                raise DatasetFormatError(f"line {lineno}: expected {k} values, found {values.size}")
            if not np.all(np.isfinite(values)):
                raise DatasetFormatError(f"line {lineno}: non-finite value")
            rows.append(values)
            raw_labels.append(label)
    if not rows:
        raise DatasetFormatError(f"{path}: empty dataset")
    classes, labels = np.unique(np.array(raw_labels), return_inverse=True)
    return Dataset(
        series=np.vstack(rows),
        labels=labels,
        n_classes=max(len(classes), n_classes or 0),
        split=split,
        name=path.stem,
    )


def save_ucr_tsv(d: Dataset, path) -> None:
    """Write ``d`` in UCR layout; floats use ``repr`` so reloading is lossless."""
    with Path(path).open("w", newline="\n") as fh:
        for label, row in zip(d.labels, d.series):
            fh.write("\t".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def z_normalize_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    centred = x - mean
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, centred / safe, 0.0)


def z_normalize(d: Dataset) -> Dataset:
    """Per-series mean 0 / population std 1; constant series become zeros."""
    return replace(d, series=z_normalize_array(d.series))


def synth_two_class(
    n_per_class: int,
    k: int,
    seed: int,
    noise: float = 0.1,
) -> tuple[Dataset, Dataset]:
    """Two phase-shifted sinusoids (three periods over ``k``) plus white noise.

    Returns z-normalized train and test splits, each holding ``n_per_class``
    series of each class. Both splits are drawn from one seeded stream so they
    never share draws.
    """
    if n_per_class < 10 or k < 32:
        raise ConfigError(f"need n_per_class >= 10 and k >= 32, got {n_per_class}, {k}")
    rng = np.random.default_rng(seed)
    t = np.arange(k)
    base = 2.0 * np.pi * t / k * 3.0
    templates = np.stack([np.sin(base), np.sin(base + np.pi / 2.0)])

    def draw(split: str) -> Dataset:
        labels = np.repeat(np.arange(2), n_per_class)
        x = templates[labels] + noise * rng.standard_normal((labels.size, k))
        order = rng.permutation(labels.size)
        return Dataset(
            series=z_normalize_array(x[order]),
            labels=labels[order],
            n_classes=2,
            split=split,
            name="synth_two_class",
        )

    train = draw("train")
    test = draw("test")
    return train, test
