import csv
import json

import numpy as np
import pytest
import yaml

from agelock import cli
from agelock.config import ExperimentConfig, emit_config, load_config, parse_config
from agelock.data import IMAGES_MAGIC, LABELS_MAGIC, write_idx
from agelock.doft import evaluate
from agelock.errors import ConfigError
from agelock.network import load_checkpoint


def test_security_complexity():
    assert cli.security_complexity(1048576, 1) == 1048576
    assert cli.security_complexity(1, 1) == 1
    assert cli.security_complexity(8, 4) == 10
    assert cli.security_complexity(3, 3) == pytest.approx(3 + np.log2(3))
    with pytest.raises(ValueError):
        cli.security_complexity(0, 1)


def test_derived_seeds_are_stable_and_distinct():
    a = [cli.derive_seed(0, cli.SEED_MASK, t) for t in range(50)]
    assert a == [cli.derive_seed(0, cli.SEED_MASK, t) for t in range(50)]
    assert len(set(a)) == 50
    assert cli.derive_seed(1, cli.SEED_MASK, 0) != a[0]
    assert cli.derive_seed(0, cli.SEED_PV, 0) != a[0]


# ----------------------------------------------------------------------------
# config


def test_minimal_config_fills_defaults():
    cfg = parse_config("seed: 3\n")
    assert cfg.seed == 3
    assert cfg.aging.sigma == 0.9 and cfg.aging.alpha == 0.24
    assert cfg.pim.v_inter == 0.01
    assert parse_config("") == ExperimentConfig()


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="aging.alhpa"):
        parse_config("aging:\n  alhpa: 0.3\n")
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config("bogus: 1\n")


def test_parse_error_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("seed: 1\naging:\n  sigma: a: b\nthreads: 2\n")


@pytest.mark.parametrize("text,key", [
    ("seed: abc\n", "seed"),
    ("model:\n  widths: 5\n", "model.widths"),
    ("aging:\n  shared: 1\n", "aging.shared"),
    ("aging:\n  sigma: 2.0\n", "aging.sigma"),
    ("sweep:\n  sigma: []\n", "sweep.sigma"),
    ("mode: analog\n", "mode"),
    ("doft:\n  optimizer: rmsprop\n", "optimizer"),
])
def test_schema_violations(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text)


def test_emit_roundtrip(tmp_path):
    text = emit_config()
    assert parse_config(text) == ExperimentConfig()
    custom = parse_config("aging:\n  sigma: 0.5\n  aged_layers: [1]\nsweep:\n  aged_layers: [0, null, 2]\n")
    path = tmp_path / "c.yaml"
    path.write_text(emit_config(custom))
    assert load_config(path) == custom


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


# ----------------------------------------------------------------------------
# CLI on a synthetic four-class IDX dataset


def write_synthetic(root, count, seed):
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(4), count // 4).astype(np.uint8)
    images = rng.integers(0, 60, (count, 4, 4)).astype(np.uint8)
    for k in range(4):
        images[labels == k, k, :] = 230
    write_idx(root / f"img{seed}", images, IMAGES_MAGIC)
    write_idx(root / f"lab{seed}", labels, LABELS_MAGIC)
    return str(root / f"img{seed}"), str(root / f"lab{seed}")


@pytest.fixture
def workspace(tmp_path):
    tri, trl = write_synthetic(tmp_path, 400, 0)
    tei, tel = write_synthetic(tmp_path, 80, 1)
    doc = {
        "seed": 5,
        "data": {"train_images": tri, "train_labels": trl, "test_images": tei, "test_labels": tel,
                 "val_holdout": 40},
        "model": {"widths": [16, 8, 4], "q": 1, "n": 8},
        "pretrain": {"epochs": 3, "batch_size": 16, "eta": 0.02},
        "doft": {"epochs": 2, "batch_size": 16, "optimizer": "adam", "eta": 0.005},
        "sweep": {"sigma": [0.0, 0.5], "alpha": [0.24], "trials": 3},
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(doc))
    return tmp_path, path


def run_cli(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_pipeline(workspace, capsys):
    root, cfg_path = workspace
    out = root / "out"
    code, stdout, _ = run_cli(["pretrain", "--config", str(cfg_path), "--out", str(out)], capsys)
    assert code == 0 and json.loads(stdout)["test_accuracy"] > 0.8
    ckpt = out / "model.ckpt"
    assert (out / "history.csv").read_text().startswith("epoch,acc,seconds")

    code, stdout, _ = run_cli(["age-gen", "--config", str(cfg_path), "--out", str(out)], capsys)
    assert code == 0 and (out / "chip.mask").exists()

    code, stdout, _ = run_cli(["doft", "--config", str(cfg_path), "--out", str(out),
                               "--checkpoint", str(ckpt), "--mask", str(out / "chip.mask")], capsys)
    assert code == 0 and (out / "doft.ckpt").exists()
    with open(out / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert 1 <= len(rows) <= 2 and "acc_unauth" in rows[0]

    code, stdout, _ = run_cli(["eval", "--config", str(cfg_path), "--out", str(out),
                               "--checkpoint", str(out / "doft.ckpt"), "--mask", str(out / "chip.mask")], capsys)
    report = json.loads(stdout)
    assert code == 0 and set(report) == {f"{b}/{m}" for b in cli.BRANCHES for m in cli.MODES}
    assert all(0 <= v <= 1 for v in report.values())


def test_sweep_csv_rows_are_rerunnable(workspace, capsys):
    root, cfg_path = workspace
    out = root / "out"
    assert run_cli(["pretrain", "--config", str(cfg_path), "--out", str(out)], capsys)[0] == 0
    code, _, _ = run_cli(["sweep", "--config", str(cfg_path), "--out", str(out),
                          "--checkpoint", str(out / "model.ckpt")], capsys)
    assert code == 0
    text = (out / "sweep.csv").read_text()
    assert text.count("sigma,alpha") == 1
    rows = list(csv.DictReader(text.splitlines()))
    assert len(rows) == 2 * 3 * 2
    assert all(r["error"] == "" and 0 <= float(r["accuracy"]) <= 1 for r in rows)
    unaged = [r for r in rows if float(r["sigma"]) == 0.0]
    assert len({r["accuracy"] for r in unaged}) == 1

    # regenerate one row from its (seed, trial) fields
    cfg = load_config(cfg_path)
    row = next(r for r in rows if float(r["sigma"]) == 0.5 and r["trial"] == "2" and r["branch"] == "authorized")
    seed = cli.derive_seed(int(row["seed"]), cli.SEED_MASK, int(row["trial"]))
    assert seed == int(row["mask_seed"])
    net = load_checkpoint(out / "model.ckpt")
    mask = cli.make_mask(cfg, net.shapes, seed, 0.5, 0.24, None)
    assert evaluate(net, cli.load_test(cfg), mask) == float(row["accuracy"])

    with open(out / "sweep_summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert len(summary) == 4 and all(s["trials"] == "3" for s in summary)


def test_sweep_zero_aged_layers(workspace, capsys):
    root, cfg_path = workspace
    out = root / "out"
    run_cli(["pretrain", "--config", str(cfg_path), "--out", str(out)], capsys)
    cfg = load_config(cfg_path)
    cfg.sweep.sigma, cfg.sweep.aged_layers, cfg.sweep.trials = [0.9], [0, 1, 2, 5], 2
    net = load_checkpoint(out / "model.ckpt")
    rows = cli.run_sweep(cfg, net, cli.load_test(cfg))
    zero = [r for r in rows if r["aged_layers"] == 0]
    assert zero[0]["accuracy"] == zero[1]["accuracy"]
    bad = [r for r in rows if r["aged_layers"] == 5]
    assert len(bad) == 2 and all("cannot age" in r["error"] for r in bad)


def test_one_point_sweep_matches_eval(workspace, capsys):
    root, cfg_path = workspace
    out = root / "out"
    run_cli(["pretrain", "--config", str(cfg_path), "--out", str(out)], capsys)
    cfg = load_config(cfg_path)
    cfg.paths.checkpoint = str(out / "model.ckpt")
    cfg.sweep.sigma, cfg.sweep.trials = [cfg.aging.sigma], 1
    rows = cli.run_sweep(cfg, load_checkpoint(cfg.paths.checkpoint), cli.load_test(cfg))
    report = cli.cmd_eval(cfg, out, ("functional",))
    for r in rows:
        assert r["accuracy"] == report[f"{r['branch']}/functional"]


def test_cli_errors_and_exit_codes(tmp_path, capsys):
    code, _, err = run_cli(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)], capsys)
    assert code != 0 and "category=config" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text("aging:\n  alhpa: 1\n")
    code, _, err = run_cli(["age-gen", "--config", str(bad)], capsys)
    assert code != 0 and "category=config" in err and "alhpa" in err
    (tmp_path / "junk.ckpt").write_bytes(b"garbage\n{}\n")
    code, _, err = run_cli(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--out", str(tmp_path)], capsys)
    assert code != 0 and "category=corrupt-file" in err


def test_cli_security_and_emit(tmp_path, capsys):
    code, out, _ = run_cli(["security", "--cells", "1048576", "--levels", "1"], capsys)
    assert code == 0 and json.loads(out)["exponent"] == 1048576
    code, out, _ = run_cli(["emit-config"], capsys)
    assert code == 0 and parse_config(out) == ExperimentConfig()
    code, _, _ = run_cli(["emit-config", "--out", str(tmp_path / "d.yaml")], capsys)
    assert code == 0 and load_config(tmp_path / "d.yaml") == ExperimentConfig()
