import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsrobust import bench
from tsrobust.attacks import AttackSpec
from tsrobust.bench import (
    BenchConfig,
    EvalReport,
    emit_report,
    load_config,
    load_data,
    macro_f1,
    natural_accuracy,
    read_reports,
    robust_accuracy,
    run_matrix,
)
from tsrobust.data import ConfigError, Dataset, save_ucr_tsv, synth_two_class
from tsrobust.model import Classifier, ClassifierConfig, TrainConfig, train

SMALL = ClassifierConfig(channels=(4, 4), kernel_sizes=(5, 3))


def tiny_config(**kw):
    base = dict(n_per_class=10, length=32, defenses=["none", "ad"], attacks=["fgsm", "pgd"], epochs=2,
                repeats=2, seed=3, attack={"iterations": 3}, at_pgd_steps=2)
    base.update(kw)
    return BenchConfig(**base)


class FixedModel:
    def __init__(self, preds, n_classes=2):
        self.preds = np.asarray(preds)
        self.n_classes = n_classes

    def predict(self, X, repeats=1, rng=None):
        return self.preds[: len(X)]


@pytest.fixture(scope="module")
def trained_small():
    train_ds, test_ds = synth_two_class(10, 32, seed=1)
    m = Classifier(SMALL, 32, seed=1)
    train(m, train_ds, TrainConfig(epochs=5))
    return m, test_ds


class TestNaturalAccuracy:
    def test_all_correct(self):
        d = Dataset(np.zeros((4, 3)), [0, 1, 1, 0], 2)
        assert natural_accuracy(FixedModel([0, 1, 1, 0]), d) == 1.0

    def test_constant_model_on_balanced_data(self):
        d = Dataset(np.zeros((6, 3)), [0, 0, 0, 1, 1, 1], 2)
        assert natural_accuracy(FixedModel([1] * 6), d) == 0.5

    def test_deterministic_repeats(self, trained_small):
        m, test = trained_small
        assert natural_accuracy(m, test, 1) == natural_accuracy(m, test, 5)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            natural_accuracy(FixedModel([]), Dataset(np.zeros((0, 3)), np.zeros(0, int), 2))


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0

    def test_hand_example(self):
        # class 0: P=1, R=0.5 -> 2/3; class 1: P=2/3, R=1 -> 0.8
        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx((2 / 3 + 0.8) / 2)
        assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx(0.7333, abs=1e-4)

    def test_single_class_predictions(self):
        assert macro_f1([0, 0, 1, 1], [0, 0, 0, 0], 2) == pytest.approx((2 / 3 + 0) / 2)

    def test_absent_class_conventions(self):
        # class 2 is absent from both -> 1; class 1 is never predicted -> 0
        assert macro_f1([0, 1], [0, 0], 3) == pytest.approx((2 / 3 + 0 + 1) / 3)

    def test_label_range(self):
        with pytest.raises(ValueError):
            macro_f1([0, 3], [0, 1], 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
    def test_bounds_and_diagonal(self, pairs):
        y, p = np.array(pairs).T
        f1 = macro_f1(y, p, 4)
        assert 0.0 <= f1 <= 1.0
        if np.array_equal(y, p):
            assert f1 == np.mean(y == p) == 1.0


class TestRobustAccuracy:
    def test_null_attack_matches_na(self, trained_small):
        m, test = trained_small
        spec = AttackSpec("pgd", epsilon=1e-9, init_span=0.0, iterations=0)
        assert robust_accuracy(m, test, spec) == natural_accuracy(m, test)

    def test_seeded(self, trained_small):
        m, test = trained_small
        spec = AttackSpec("pgd", iterations=5, seed=2)
        assert robust_accuracy(m, test, spec) == robust_accuracy(m, test, spec)

    def test_bounded(self, trained_small):
        m, test = trained_small
        assert 0.0 <= robust_accuracy(m, test, AttackSpec("fgsm")) <= 1.0


class TestConfig:
    def test_unknown_defense(self):
        with pytest.raises(ConfigError):
            BenchConfig(defenses=["magic"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            BenchConfig.from_dict({"epoch": 3})

    def test_bad_attack_block(self):
        with pytest.raises(ConfigError):
            BenchConfig(attack={"method": "pgd"})
        with pytest.raises(ConfigError):
            BenchConfig(attack={"epsilon": -1.0})

    def test_round_trip(self):
        cfg = tiny_config()
        assert BenchConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    def test_scalar_flags(self):
        cfg = BenchConfig.from_dict({"defense": "sd", "attack": "gm"})
        assert cfg.defenses == ["sd"] and cfg.attacks == ["gm"]

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 1, "epochs": 7, "augment": {"jitter": {"p_j": 0.5}},
                                    "attack": {"epsilon": 0.05}}))
        assert load_config(path, env={}).seed == 1
        cfg = load_config(path, env={"TSROBUST_SEED": "9"})
        assert cfg.seed == 9 and cfg.epochs == 7 and cfg.augment.jitter.p_j == 0.5
        assert cfg.attack_spec("pgd", 0).epsilon == 0.05
        assert load_config(path, {"seed": 4}, env={"TSROBUST_SEED": "9"}).seed == 4

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(path, env={})

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError):
            load_config(env={"TSROBUST_SEED": "abc"})


class TestLoadData:
    def test_ucr_pair(self, tmp_path):
        train_ds, test_ds = synth_two_class(10, 32, seed=2)
        save_ucr_tsv(train_ds, tmp_path / "Toy_TRAIN.tsv")
        save_ucr_tsv(test_ds, tmp_path / "Toy_TEST.tsv")
        for source in (tmp_path, tmp_path / "Toy_TRAIN.tsv"):
            tr, te = load_data(BenchConfig(data=str(source)))
            assert tr.name == "Toy" and te.split == "test"
            np.testing.assert_allclose(tr.series, train_ds.series, atol=1e-12)

    def test_missing_train_marker(self, tmp_path):
        (tmp_path / "x.tsv").write_text("0\t1\t2\n")
        with pytest.raises(ConfigError):
            load_data(BenchConfig(data=str(tmp_path / "x.tsv")))


class TestMatrix:
    def test_shape(self):
        reports = run_matrix(tiny_config())
        assert [r.defense for r in reports] == ["none", "ad"]
        for r in reports:
            assert list(r.RA) == ["fgsm", "pgd"]
            assert r.seed == 3 and r.error is None
            assert all(0 <= v <= 1 for v in [r.NA, r.F1, *r.RA.values()])

    def test_rerun_identical(self):
        a = run_matrix(tiny_config(defenses=["none", "sd"]))
        b = run_matrix(tiny_config(defenses=["none", "sd"]))
        for x, y in zip(a, b):
            assert (x.NA, x.F1, x.RA) == (y.NA, y.F1, y.RA)

    def test_resume_reuses_cells(self, tmp_path, monkeypatch):
        cfg = tiny_config(defenses=["none"])
        first = run_matrix(cfg, tmp_path)
        assert (tmp_path / "cells" / "none.json").exists()
        assert (tmp_path / "models" / "none.json").exists()

        def boom(*a, **k):
            raise AssertionError("cell should have been reused")

        monkeypatch.setattr(bench, "build_defense", boom)
        assert run_matrix(cfg, tmp_path)[0].to_dict() == first[0].to_dict()

    def test_failed_cell_recorded(self, tmp_path, monkeypatch):
        real = bench.build_defense

        def flaky(name, cfg, d):
            if name == "sd":
                raise RuntimeError("synthetic failure")
            return real(name, cfg, d)

        monkeypatch.setattr(bench, "build_defense", flaky)
        reports = run_matrix(tiny_config(defenses=["sd", "none"]), tmp_path)
        assert "synthetic failure" in reports[0].error and reports[0].NA is None
        assert reports[1].error is None and reports[1].NA is not None
        # failed cells are retried on the next run
        monkeypatch.setattr(bench, "build_defense", real)
        assert run_matrix(tiny_config(defenses=["sd", "none"]), tmp_path)[0].error is None

    def test_config_change_invalidates_cell(self, tmp_path):
        a = run_matrix(tiny_config(defenses=["none"]), tmp_path)[0]
        b = run_matrix(tiny_config(defenses=["none"], seed=4), tmp_path)[0]
        assert a.seed == 3 and b.seed == 4

    def test_parallel_cells_flagged(self, tmp_path):
        cfg = tiny_config(defenses=["none", "smooth"], parallel_cells=2)
        par = run_matrix(cfg, tmp_path)
        seq = run_matrix(tiny_config(defenses=["none", "smooth"]))
        assert all(not r.timings_comparable for r in par)
        for x, y in zip(par, seq):
            assert (x.defense, x.NA, x.F1, x.RA) == (y.defense, y.NA, y.F1, y.RA)

    @pytest.mark.parametrize("name", bench.DEFENSES)
    def test_every_defense_builds(self, name):
        cfg = tiny_config(defenses=[name], epochs=1)
        train_ds, _ = load_data(cfg)
        model, seconds = bench.build_defense(name, cfg, train_ds)
        assert seconds > 0 and model.predict(train_ds.series[:3]).shape == (3,)

    def test_model_checkpoints_reload(self, tmp_path):
        cfg = tiny_config(defenses=["ad", "dd"], epochs=1)
        run_matrix(cfg, tmp_path)
        x = load_data(cfg)[1].series
        for name in ("ad", "dd"):
            m = bench.load_model(tmp_path / "models" / name if name == "ad" else tmp_path / "models" / "dd.json")
            assert m.predict_proba(x).shape == (x.shape[0], 2)


def sample_report(defense="none", **kw):
    d = dict(dataset="synth", defense=defense, NA=0.1 + 0.2, F1=2 / 3, RA={"pgd": 1 / 7, "fgsm": 0.5},
             train_seconds=1.2345678901234567, repeats=5, seed=1, config={"a": 1})
    d.update(kw)
    return EvalReport(**d)


class TestEmit:
    def test_empty(self, tmp_path):
        assert json.loads(emit_report([], "json", tmp_path / "r.json").read_text()) == []
        assert (tmp_path / "r.csv").exists() is False
        emit_report([], "csv", tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().strip() == "defense,NA,F1,Time"

    def test_json_round_trip_bitwise(self, tmp_path):
        reports = [sample_report(), sample_report("ad", NA=None, error="x")]
        path = emit_report(reports, "json", tmp_path / "r.json")
        assert [r.to_dict() for r in read_reports(path)] == [r.to_dict() for r in reports]

    def test_json_field_names(self, tmp_path):
        path = emit_report([sample_report()], "json", tmp_path / "r.json")
        assert set(json.loads(path.read_text())[0]) >= {
            "dataset", "defense", "NA", "F1", "RA", "train_seconds", "repeats", "seed", "config"}

    def test_csv_layout(self, tmp_path):
        path = emit_report([sample_report(), sample_report("sd")], "csv", tmp_path / "r.csv")
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["defense", "NA", "F1", "Time", "RA_pgd", "RA_fgsm"]
        assert [r[0] for r in rows[1:]] == ["none", "sd"]
        assert float(rows[1][1]) == 0.1 + 0.2 and float(rows[1][4]) == 1 / 7

    def test_csv_attack_order_from_config(self, tmp_path):
        path = emit_report([sample_report()], "csv", tmp_path / "r.csv", ["fgsm", "pgd"])
        assert next(csv.reader(path.open()))[4:] == ["RA_fgsm", "RA_pgd"]

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_report([], "json", tmp_path / "missing" / "r.json")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_report([], "xml", tmp_path / "r.xml")

    def test_table_text(self):
        text = bench.format_table([sample_report(), sample_report("ad", NA=None)])
        assert text.splitlines()[0].split() == ["defense", "NA", "F1", "Time", "RA_pgd", "RA_fgsm"]
        assert "-" in text.splitlines()[2]
