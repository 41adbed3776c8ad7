"""Acceptance criteria 1-9. Each test records one PASS/FAIL line.

The lines are printed in the pytest terminal summary and when this file is run
directly with ``python tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest

from dynsurrogate.cli import run_cli
from dynsurrogate.crosscheck import mdof_oracle_check, sdof_oracle_check, sdof_residual_check, tangent_fd_check
from dynsurrogate.nn import BatchNorm, Conv1D, Dense, Model, Sparse, dense_model, param_count
from dynsurrogate.sampling import compute_norm_stats, dataspace, generate_dataset, normalize
from dynsurrogate.sparsify import (
    build_conv_dense_template,
    build_sparse_template,
    grow,
    sparsity_mask,
    structured_mask,
)
from dynsurrogate.training import TrainConfig, train

from gradcheck import max_rel_error, randomize_bn

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    print(RESULTS[n])


def test_criterion_1_sdof_oracle():
    t0 = time.perf_counter()
    disp, acc = sdof_oracle_check(100)
    elapsed = time.perf_counter() - t0
    ok = disp.passed and acc.passed and elapsed < 60
    record(1, ok, f"{disp.line()}; {acc.line()}; {elapsed:.1f} s")
    assert disp.passed, disp.line()
    assert acc.passed, acc.line()
    assert elapsed < 60


def test_criterion_2_mdof_oracle():
    disp, acc, w1, w2 = mdof_oracle_check(50)
    ok = disp.passed and w1.passed and w2.passed
    record(2, ok, f"{disp.line()}; {w1.line()}; {w2.line()}; info: {acc.line()}")
    assert disp.passed, disp.line()
    assert w1.passed and w2.passed


def _grad_models():
    rng = np.random.default_rng(3)
    mask = rng.random((6, 6)) < 0.5
    np.fill_diagonal(mask, True)
    template = build_sparse_template(9, 2, structured_mask("banded_lower", 9, 4), n_c=3, seed=1, dtype=np.float64)
    return rng, {
        "fc": (Model([Dense(4, "relu"), Dense(3)], 6, np.float64), (5, 6), 1e-5),
        "sc": (Model([Sparse(mask, "relu"), Sparse(mask)], 6, np.float64), (5, 6), 1e-5),
        "conv f=1": (Model([Conv1D(3, 1), Conv1D(2, 1, "linear")], 7, np.float64), (4, 7), 1e-5),
        "conv f=2": (Model([Conv1D(3, 2), Conv1D(2, 2, "linear")], 7, np.float64), (4, 7), 1e-5),
        "bn train": (Model([Conv1D(3, 2, "linear"), BatchNorm(), Conv1D(1, 1, "linear")], 7, np.float64),
                     (6, 7), 1e-5),
        "sparse template": (template, (6, 9), 1e-4),
    }


def test_criterion_3_gradient_checks():
    from dynsurrogate.nn import init_params

    t0 = time.perf_counter()
    rng, models = _grad_models()
    errs = {}
    for name, (model, shape, _) in models.items():
        if name != "sparse template":
            init_params(model, 0)
        randomize_bn(model, rng)
        errs[name] = max_rel_error(model, rng.normal(size=shape), training=True, rng=rng)
    failed = [k for k, (_, _, tol) in models.items() if not errs[k] < tol]
    elapsed = time.perf_counter() - t0
    record(3, not failed and elapsed < 30,
           ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f} s")
    assert not failed, failed


PAPER_COUNTS = {"dense 101": 10302, "lower sc": 5252, "lower n_l=6": 9169,
                "banded sc": 15452, "banded n_l=9": 23359, "fc 201": 40602, "conv_dense n_l=5": 166595}


def test_criterion_4_parameter_counts():
    lower = build_sparse_template(101, 6, structured_mask("lower_triangular", 101))
    banded = build_sparse_template(201, 9, structured_mask("banded_lower", 201, 100))
    conv_dense = build_conv_dense_template(201, 5, 4)
    got = {
        "dense 101": param_count(dense_model(101))["trainable"],
        "lower sc": param_count(lower)["layers"][-1]["trainable"],
        "lower n_l=6": param_count(lower)["trainable"],
        "banded sc": param_count(banded)["layers"][-1]["trainable"],
        "banded n_l=9": param_count(banded)["trainable"],
        "fc 201": param_count(conv_dense)["layers"][-1]["trainable"],
        "conv_dense n_l=5": param_count(conv_dense)["trainable"],
    }
    record(4, got == PAPER_COUNTS, ", ".join(f"{k}={v}" for k, v in got.items()))
    assert got == PAPER_COUNTS


def least_squares_mse(train_set, test_set) -> float:
    """Test MSE of the exact affine least-squares fit to the training set."""
    X, Y = train_set
    A = np.hstack([X, np.ones((len(X), 1))])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    Xt, Yt = test_set
    R = np.hstack([Xt, np.ones((len(Xt), 1))]) @ coef - Yt
    return float(np.mean(np.sum(R**2, axis=1)))


def test_criterion_5_desk_training(case1, trained_fc):
    from dynsurrogate.evaluate import mse_metric

    t0 = time.perf_counter()
    model, _ = trained_fc
    mse = mse_metric(model, case1.test)
    oracle = least_squares_mse(case1.train, case1.test)
    ratio = mse / oracle
    mask, rep = sparsity_mask(model.layers[0].params["W"])
    elapsed = time.perf_counter() - t0
    ok = ratio < 2 and rep.lower_fraction >= 0.95
    record(5, ok, f"test MSE {mse:.3e} vs least-squares {oracle:.3e} (ratio {ratio:.3g} < 2); "
                  f"{rep.nnz} survivors, {100 * rep.lower_fraction:.1f}% on/below diagonal (>= 95%)")
    assert rep.lower_fraction >= 0.95
    assert ratio < 2, f"ratio {ratio:.3g}"


def test_criterion_6_growth_stability(case1, trained_fc):
    fc, _ = trained_fc
    _, rep = sparsity_mask(fc.layers[0].params["W"])
    mask = structured_mask(rep.kind, 101, rep.band_width)
    cfg = TrainConfig(batch_size=256, learning_rate=1e-3, epochs=20, seed=0)
    model = build_sparse_template(101, 1, mask, fc.layers[0], seed=0)
    train(model, case1.train, case1.val, cfg)
    _, steps = grow(model, 3, case1.train, case1.val, cfg)
    ratios = [s.ratio for s in steps]
    ok = len(steps) == 2 and all(r <= 1.05 for r in ratios)
    record(6, ok, ", ".join(f"n_l={s.n_l}: {s.loss_before:.4g} -> {s.loss_after:.4g} ({s.ratio:.3f})" for s in steps))
    assert len(steps) == 2
    assert all(r <= 1.05 for r in ratios), ratios


def test_criterion_7_nonlinear_residual():
    res = sdof_residual_check(20)
    tan = tangent_fd_check()
    record(7, res.passed and tan.passed, f"{res.line()}; {tan.line()}")
    assert res.passed, res.line()
    assert tan.passed, tan.line()


def test_criterion_8_determinism(tmp_path):
    data, model = tmp_path / "data", tmp_path / "model"
    data_files = ("train.nds", "val.nds", "test.nds", "x_stats.nst", "y_stats.nst", "config.json")
    model_files = ("model.nck", "model.json", "history.csv")
    snapshots = []
    for _ in range(2):
        assert run_cli(["gen-data", "--case", "1", "--n-train", "512", "--n-val", "128", "--n-test", "128",
                        "--seed", "11", "--out", str(data)]) == 0
        assert run_cli(["train", "--data", str(data), "--epochs", "3", "--batch-size", "64",
                        "--seed", "5", "--deterministic", "--out", str(model)]) == 0
        snapshots.append({n: (data / n).read_bytes() for n in data_files}
                         | {n: (model / n).read_bytes() for n in model_files})
    a, b = snapshots
    data_same = sum(a[n] == b[n] for n in data_files)
    model_same = sum(a[n] == b[n] for n in model_files)
    ok = data_same == len(data_files) and model_same == len(model_files)
    record(8, ok, f"gen-data {data_same}/{len(data_files)} identical files, "
                  f"train {model_same}/{len(model_files)} identical files")
    assert ok


def test_criterion_9_normalization():
    space = dataspace(1, "displacement")
    ds = generate_dataset(space, "train", 0, 512)
    xs, ys = compute_norm_stats(ds)
    worst = 0.0
    for data, stats in ((ds.X, xs), (ds.Y, ys)):
        back = normalize(normalize(data, stats), stats, "inverse")
        worst = max(worst, float(np.max(np.abs(back - data)) / np.max(np.abs(data))))
    first = normalize(ds.Y, ys)[:, 0]
    zero = bool(np.all(ds.Y[:, 0] == 0) and np.all(first == 0))
    record(9, worst < 1e-12 and zero, f"round-trip relative error {worst:.1e} < 1e-12; "
                                      f"first displacement component normalized exactly 0: {zero}")
    assert worst < 1e-12
    assert zero


if __name__ == "__main__":
    import sys

    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"] + sys.argv[1:]))
