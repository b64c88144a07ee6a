"""Command line entry point: ``tsrobust train|attack|bench|report``."""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import bench
from .attacks import AttackMethod
from .data import ConfigError, DatasetFormatError, save_ucr_tsv

ATTACK_NAMES = [m.value for m in AttackMethod]


def _split(value):
    if value is None:
        return None
    items = [v.strip() for v in value.split(",") if v.strip()]
    return items or None


def common_options(multi: bool):
    """Flags shared by every command. ``multi`` allows comma-separated defense/attack lists."""
    kind = click.STRING if multi else None

    def decorate(fn):
        opts = [
            click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                         help="JSON config mirroring the flags plus 'augment' and 'attack' blocks."),
            click.option("--data", help="'synth' or a UCR *_TRAIN.tsv file or directory."),
            click.option("--defense", type=kind or click.Choice(bench.DEFENSES),
                         help="Defense" + (" list, comma separated." if multi else ".")),
            click.option("--attack", type=kind or click.Choice(ATTACK_NAMES),
                         help="Attack" + (" list, comma separated." if multi else ".")),
            click.option("--epochs", type=click.IntRange(min=1)),
            click.option("--seed", type=int, help="Master seed; overrides TSROBUST_SEED and the config."),
            click.option("--out", type=click.Path(file_okay=False), default="tsrobust-out", show_default=True),
            click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json", show_default=True),
            click.option("--repeats", type=click.IntRange(min=1), help="Forward passes averaged per prediction [default: 5]."),
            click.option("--sd-per-epoch/--sd-per-call", default=None,
                         help="Shuffle defense draws once per epoch instead of per forward call."),
            click.option("--parallel-cells", type=click.IntRange(min=1),
                         help="Concurrent matrix cells; timings are then not comparable."),
            click.option("-v", "--verbose", is_flag=True),
        ]
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return decorate


def _config(config_path, data, defense, attack, epochs, seed, repeats, sd_per_epoch, parallel_cells):
    overrides = {
        "data": data,
        "defenses": _split(defense),
        "attacks": _split(attack),
        "epochs": epochs,
        "seed": seed,
        "repeats": repeats,
        "sd_per_epoch": sd_per_epoch,
        "parallel_cells": parallel_cells,
    }
    return bench.load_config(config_path, overrides)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
            raise click.ClickException(str(exc)) from None
    return wrapper


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _single(flag_value, values, fallback):
    """The flag's value, else the config's only entry, else ``fallback``."""
    if flag_value is not None or len(values) == 1:
        return values[0]
    return fallback


@click.group()
@click.version_option(package_name="tsrobust")
def main():
    """Adversarial attacks and augmentation defenses for time series classifiers."""


@main.command()
@common_options(multi=False)
@handle_errors
def train(config_path, data, defense, attack, epochs, seed, out, fmt, repeats, sd_per_epoch, parallel_cells, verbose):
    """Train one defense, save its checkpoint and print its natural accuracy."""
    _setup_logging(verbose)
    cfg = _config(config_path, data, defense, attack, epochs, seed, repeats, sd_per_epoch, parallel_cells)
    name = _single(defense, cfg.defenses, "none")
    train_ds, test_ds = bench.load_data(cfg)
    model, seconds = bench.build_defense(name, cfg, train_ds)
    path = bench.save_model(model, Path(out) / name)
    na = bench.natural_accuracy(model, test_ds, cfg.repeats, np.random.default_rng(cfg.seed))
    click.echo(f"defense={name} NA={na:.4f} train_seconds={seconds:.2f} checkpoint={path}")


@main.command()
@common_options(multi=False)
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="Checkpoint to attack; without it the chosen defense is trained first.")
@handle_errors
def attack(config_path, data, defense, attack, epochs, seed, out, fmt, repeats, sd_per_epoch, parallel_cells,
           verbose, model_path):
    """Attack the test split and write the adversarial series plus a summary."""
    _setup_logging(verbose)
    cfg = _config(config_path, data, defense, attack, epochs, seed, repeats, sd_per_epoch, parallel_cells)
    method = _single(attack, cfg.attacks, "pgd")
    train_ds, test_ds = bench.load_data(cfg)
    if model_path is not None:
        model = bench.load_model(model_path)
        name = Path(model_path).stem
    else:
        name = _single(defense, cfg.defenses, "none")
        model, _ = bench.build_defense(name, cfg, train_ds)
    spec = cfg.attack_spec(method, cfg.seed)
    adv = bench.attack_dataset(model, test_ds, spec)
    rng = np.random.default_rng(cfg.seed)
    na = bench.natural_accuracy(model, test_ds, cfg.repeats, rng)
    ra = bench.natural_accuracy(model, adv, cfg.repeats, rng)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_ucr_tsv(adv, out_dir / f"{test_ds.name}_{method}_TEST.tsv")
    linf = float(np.abs(adv.series - test_ds.series).max())
    summary = {"model": name, "attack": spec.to_dict(), "NA": na, "RA": ra, "max_abs_delta": linf}
    (out_dir / f"attack_{method}.json").write_text(json.dumps(summary, indent=1))
    click.echo(f"model={name} attack={method} NA={na:.4f} RA={ra:.4f} max|delta|={linf:.4g}")


@main.command(name="bench")
@common_options(multi=True)
@handle_errors
def bench_cmd(config_path, data, defense, attack, epochs, seed, out, fmt, repeats, sd_per_epoch, parallel_cells,
              verbose):
    """Run the defense x attack matrix; finished cells in --out are reused."""
    _setup_logging(verbose)
    cfg = _config(config_path, data, defense, attack, epochs, seed, repeats, sd_per_epoch, parallel_cells)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = bench.run_matrix(cfg, out_dir)
    path = bench.emit_report(reports, fmt, out_dir / f"report.{fmt}", cfg.attacks)
    click.echo(bench.format_table(reports))
    for r in reports:
        if r.error:
            click.echo(f"cell {r.defense} failed: {r.error}", err=True)
    click.echo(f"report written to {path}")


@main.command()
@click.option("--out", type=click.Path(exists=True, file_okay=False), default="tsrobust-out", show_default=True,
              help="Bench output directory whose cell checkpoints are collected.")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False),
              help="Read a JSON report file instead of the cell checkpoints.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="csv", show_default=True)
@handle_errors
def report(out, input_path, fmt):
    """Re-emit a combined report from finished cells."""
    reports = bench.read_reports(input_path or out)
    path = bench.emit_report(reports, fmt, Path(out) / f"report.{fmt}")
    click.echo(bench.format_table(reports))
    click.echo(f"report written to {path}")


if __name__ == "__main__":
    main()
