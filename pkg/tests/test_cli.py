import json

import pytest
from click.testing import CliRunner

from tsrobust.cli import main
from tsrobust.data import load_ucr_tsv


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_per_class": 10, "length": 32, "epochs": 2, "repeats": 2,
                                "attack": {"iterations": 3}, "at_pgd_steps": 2}))
    return str(path)


def run(*args, env=None):
    result = CliRunner().invoke(main, list(args), env=env or {})
    return result


def test_help_lists_commands():
    out = run("--help").output
    for cmd in ("train", "attack", "bench", "report"):
        assert cmd in out


def test_train_writes_checkpoint(tmp_path, config):
    r = run("train", "--config", config, "--defense", "sd", "--seed", "2", "--out", str(tmp_path / "o"))
    assert r.exit_code == 0, r.output
    assert "defense=sd" in r.output
    assert (tmp_path / "o" / "sd.json").exists()


def test_train_ensemble_manifest(tmp_path, config):
    r = run("train", "--config", config, "--defense", "ad", "--epochs", "1", "--out", str(tmp_path))
    assert r.exit_code == 0, r.output
    assert (tmp_path / "ad" / "ensemble.json").exists()


def test_attack_from_checkpoint(tmp_path, config):
    out = str(tmp_path)
    assert run("train", "--config", config, "--out", out, "--defense", "none").exit_code == 0
    r = run("attack", "--config", config, "--model", str(tmp_path / "none.json"), "--attack", "fgsm", "--out", out)
    assert r.exit_code == 0, r.output
    summary = json.loads((tmp_path / "attack_fgsm.json").read_text())
    assert summary["max_abs_delta"] <= 0.1 + 1e-12
    adv = load_ucr_tsv(tmp_path / "synth_two_class_fgsm_TEST.tsv")
    assert adv.n == 20


def test_bench_then_report(tmp_path, config):
    out = str(tmp_path / "b")
    r = run("bench", "--config", config, "--defense", "none,smooth", "--attack", "fgsm,pgd", "--out", out,
            "--format", "csv")
    assert r.exit_code == 0, r.output
    lines = (tmp_path / "b" / "report.csv").read_text().splitlines()
    assert lines[0] == "defense,NA,F1,Time,RA_fgsm,RA_pgd"
    assert [l.split(",")[0] for l in lines[1:]] == ["none", "smooth"]
    r = run("report", "--out", out, "--format", "json")
    assert r.exit_code == 0, r.output
    reports = json.loads((tmp_path / "b" / "report.json").read_text())
    assert [x["defense"] for x in reports] == ["none", "smooth"]


def test_env_seed(tmp_path, config):
    out = str(tmp_path / "b")
    r = run("bench", "--config", config, "--defense", "none", "--attack", "fgsm", "--out", out,
            env={"TSROBUST_SEED": "11"})
    assert r.exit_code == 0, r.output
    assert json.loads((tmp_path / "b" / "report.json").read_text())[0]["seed"] == 11


def test_bad_defense_choice(tmp_path):
    r = run("train", "--defense", "magic", "--out", str(tmp_path))
    assert r.exit_code != 0 and "magic" in r.output


def test_config_error_is_reported(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"defenses": ["nope"]}))
    r = run("bench", "--config", str(bad), "--out", str(tmp_path))
    assert r.exit_code == 1 and "unknown defense" in r.output
