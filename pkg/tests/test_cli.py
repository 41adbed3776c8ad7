import json

import numpy as np
import pytest

from dynsurrogate.checkpoint import load_model, read_checkpoint, write_checkpoint
from dynsurrogate.cli import DEFAULTS, build_parser, load_config, run_cli
from dynsurrogate.nn import dense_model, init_params


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code = run_cli(["gen-data", "--case", "1", "--n-train", "256", "--n-val", "64", "--n-test", "64",
                    "--seed", "7", "--out", str(d / "data")])
    assert code == 0
    return d


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as e:
        build_parser().parse_args(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "analyze-sparsity", "build-sparse", "grow", "eval", "predict", "verify"):
        assert cmd in out


def test_unknown_flag_fails_fast():
    with pytest.raises(SystemExit) as e:
        run_cli(["train", "--no-such-flag"])
    assert e.value.code != 0


def test_gen_data_deterministic(workdir):
    again = workdir / "again"
    assert run_cli(["gen-data", "--case", "1", "--n-train", "256", "--n-val", "64", "--n-test", "64",
                    "--seed", "7", "--out", str(again)]) == 0
    for name in ("train.nds", "val.nds", "test.nds", "x_stats.nst", "y_stats.nst"):
        assert (again / name).read_bytes() == (workdir / "data" / name).read_bytes()


def test_config_defaults_and_precedence(tmp_path):
    cfg = load_config()
    assert cfg["train"]["learning_rate"] == 1e-3 and cfg["train"]["batch_size"] == 1024
    assert cfg["train"]["epochs"] == 300 and cfg["model"]["n_c"] == 16
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 5, "batch_size": 32}}))
    assert load_config(path)["train"]["epochs"] == 5
    assert DEFAULTS["train"]["epochs"] == 300


def test_flags_override_config_file(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 7, "batch_size": 64}, "seed": 3}))
    out = tmp_path / "m"
    assert run_cli(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--epochs", "2",
                    "--out", str(out)]) == 0
    assert len((out / "history.csv").read_text().splitlines()) == 3


def test_unknown_config_key(workdir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochz": 1}}))
    assert run_cli(["train", "--config", str(cfg), "--data", str(workdir / "data")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_distinct_error_messages(workdir, tmp_path, capsys):
    assert run_cli(["train", "--data", str(tmp_path / "nowhere")]) == 3
    assert "missing file" in capsys.readouterr().err
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("x_stats.nst", "y_stats.nst", "val.nds"):
        (bad / name).write_bytes((workdir / "data" / name).read_bytes())
    (bad / "train.nds").write_bytes(b"JUNK" + bytes(60))
    assert run_cli(["train", "--data", str(bad)]) == 4
    assert "bad file format" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert run_cli(["train", "--config", str(tmp_path / "broken.json")]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_train_zero_epochs_checkpoint_equals_initialization(workdir, tmp_path):
    out = tmp_path / "m0"
    assert run_cli(["train", "--data", str(workdir / "data"), "--epochs", "0", "--seed", "4", "--out", str(out)]) == 0
    ref = tmp_path / "ref.nck"
    write_checkpoint(ref, init_params(dense_model(101), 4))
    assert ref.read_bytes() == (out / "model.nck").read_bytes()


def test_train_deterministic_bit_identical(workdir, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"d{i}"
        assert run_cli(["train", "--data", str(workdir / "data"), "--epochs", "2", "--batch-size", "32",
                        "--deterministic", "--out", str(out)]) == 0
        outs.append(out)
    for name in ("model.nck", "model.json", "history.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_full_workflow(workdir, tmp_path, capsys):
    data = str(workdir / "data")
    dense, rep, sp, grown = (str(tmp_path / n) for n in ("dense", "rep", "sp", "grown"))
    assert run_cli(["train", "--data", data, "--preset", "desk", "--epochs", "3", "--out", dense]) == 0
    assert run_cli(["analyze-sparsity", "--model", dense, "--out", rep]) == 0
    assert json.loads((tmp_path / "rep" / "sparsity.json").read_text())["nnz"] > 0
    assert run_cli(["build-sparse", "--model", dense, "--mask", f"{rep}/mask_fitted.nmk", "--n-l", "1",
                    "--n-c", "4", "--out", sp]) == 0
    assert run_cli(["train", "--data", data, "--init-model", sp, "--epochs", "1", "--batch-size", "64",
                    "--out", sp]) == 0
    assert run_cli(["grow", "--model", sp, "--data", data, "--target-n-l", "2", "--epochs", "2",
                    "--batch-size", "64", "--out", grown]) == 0
    assert [l.kind for l in load_model(f"{grown}/model.json").layers] == ["conv", "bn", "conv", "bn", "conv", "sc"]
    assert run_cli(["eval", "--model", grown, "--data", data, "--per-sample", "--out", rep]) == 0
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert report["n_test"] == 64 and report["case"] == 1
    assert run_cli(["predict", "--model", grown, "--data", data, "--sample", "2",
                    "--output", f"{rep}/pred.csv"]) == 0
    rows = np.loadtxt(f"{rep}/pred.csv", delimiter=",", skiprows=1)
    assert rows.shape == (101, 3)


def test_conv_dense_build(workdir, tmp_path):
    data = str(workdir / "data")
    dense = str(tmp_path / "dense5")
    assert run_cli(["train", "--data", data, "--template", "dense", "--n-layers", "3", "--epochs", "1",
                    "--batch-size", "64", "--out", dense]) == 0
    out = str(tmp_path / "cd")
    assert run_cli(["build-sparse", "--model", dense, "--template", "conv_dense", "--n-l", "2", "--n-c", "4",
                    "--n-fc-remaining", "2", "--out", out]) == 0
    _, entries = read_checkpoint(f"{out}/model.nck")
    _, src = read_checkpoint(f"{dense}/model.nck")
    np.testing.assert_array_equal(entries["fc1.W"][0], src["fc2.W"][0])


def test_verify_reports_discrepancy(capsys):
    code = run_cli(["verify", "--case", "1", "--n-loads", "5"])
    out = capsys.readouterr().out
    assert "sdof displacement max-abs" in out and "PASS sdof displacement" in out
    assert code in (0, 1)


def test_threads_environment_fallback(monkeypatch, workdir, tmp_path):
    monkeypatch.setenv("NDS_THREADS", "1")
    assert run_cli(["train", "--data", str(workdir / "data"), "--epochs", "0", "--out", str(tmp_path / "t")]) == 0
    monkeypatch.setenv("NDS_THREADS", "many")
    assert run_cli(["train", "--data", str(workdir / "data"), "--epochs", "0", "--out", str(tmp_path / "t")]) == 2
