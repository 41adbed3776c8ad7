"""Test metrics, end-to-end prediction and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Model, StatisticsNotFinalizedError
from .sampling import NormStats, normalize
from .training import _as_arrays, evaluate_loss


def _require_finalized(model: Model):
    if not model.finalized:
        raise StatisticsNotFinalizedError("BN population statistics are not finalized")


def mse_metric(model: Model, test_set, batch_size: int = 4096) -> float:
    """Mean squared-norm error on a normalized set, evaluation phase."""
    _require_finalized(model)
    X, Y = _as_arrays(test_set)
    return evaluate_loss(model, np.asarray(X, model.dtype), np.asarray(Y, model.dtype), 0.0,
                         training=False, batch_size=batch_size)


def relative_error(y, y_hat) -> np.ndarray | float:
    """``100 * ||y - y_hat|| / ||y||`` along the last axis."""
    y = np.asarray(y, dtype=np.float64)
    ref = np.linalg.norm(y, axis=-1)
    if np.any(ref == 0):
        raise ZeroDivisionError("relative error undefined for a zero reference vector")
    out = 100.0 * np.linalg.norm(y - np.asarray(y_hat, dtype=np.float64), axis=-1) / ref
    return float(out) if np.ndim(out) == 0 else out


def predict(model: Model, x, x_stats: NormStats, y_stats: NormStats, batch_size: int = 4096) -> np.ndarray:
    """Physical-unit response for raw load series ``x`` (one row per sample)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != len(x_stats) or len(x_stats) != model.n_in or model.n_out != len(y_stats):
        raise ValueError(f"shape mismatch: input {x.shape[1]}, x-stats {len(x_stats)}, "
                         f"model {model.n_in}->{model.n_out}, y-stats {len(y_stats)}")
    _require_finalized(model)
    xn = normalize(x, x_stats)
    yn = np.concatenate([model.forward(xn[i:i + batch_size]) for i in range(0, len(xn), batch_size)])
    y = normalize(yn.astype(np.float64), y_stats, "inverse")
    return y[0] if single else y


@dataclass
class EvalReport:
    case: int
    model: str
    mse: float
    mean_rel_err_pct: float
    rel_err_pct: np.ndarray = field(repr=False)

    @property
    def n_test(self) -> int:
        return len(self.rel_err_pct)

    def to_json(self) -> dict:
        return {"case": self.case, "model": self.model, "mse": self.mse,
                "mean_rel_err_pct": self.mean_rel_err_pct, "n_test": self.n_test}

    def save(self, path, per_sample_csv=None) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))
        if per_sample_csv is not None:
            with open(per_sample_csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["sample_id", "rel_err_pct"])
                for i, e in enumerate(self.rel_err_pct):
                    w.writerow([i, repr(float(e))])


def evaluate(model: Model, raw_test, x_stats: NormStats, y_stats: NormStats, *,
             case: int = 0, name: str = "model") -> EvalReport:
    """MSE in normalized space and relative errors in physical units."""
    X, Y = _as_arrays(raw_test)
    mse = mse_metric(model, (normalize(X, x_stats), normalize(Y, y_stats)))
    rel = relative_error(Y, predict(model, X, x_stats, y_stats))
    rel = np.atleast_1d(rel)
    return EvalReport(case, name, mse, float(rel.mean()), rel)


def write_prediction_csv(path, t, y_true, y_pred) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y_true", "y_pred"])
        for row in zip(t, y_true, y_pred):
            w.writerow([repr(float(v)) for v in row])
