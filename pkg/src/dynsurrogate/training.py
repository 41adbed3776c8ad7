"""Loss, Adam and the mini-batch training loop."""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .nn import Model

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    reg_weight: float = 1e-4
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1024
    epochs: int = 300
    seed: int = 0
    frozen_params: frozenset[str] = field(default_factory=frozenset)
    deterministic: bool = False

    def __post_init__(self):
        self.frozen_params = frozenset(self.frozen_params)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam decay rates must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0 or self.eps <= 0 or self.reg_weight < 0:
            raise ValueError("learning_rate and eps must be positive, reg_weight non-negative")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["frozen_params"] = sorted(self.frozen_params)
        return d


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Adam with bias-corrected moments and one step counter per parameter.

    State is created the first time a parameter is updated, so parameters
    that were frozen so far start from fresh moments when released.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, AdamState] = {}

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Adam":
        return cls(config.learning_rate, config.beta1, config.beta2, config.eps)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        """Update ``param`` in place."""
        st = self.state.get(name)
        if st is None:
            st = self.state[name] = AdamState(np.zeros_like(param), np.zeros_like(param))
        st.step += 1
        st.m *= self.beta1
        st.m += (1 - self.beta1) * grad
        st.v *= self.beta2
        st.v += (1 - self.beta2) * grad * grad
        m_hat = st.m / (1 - self.beta1 ** st.step)
        v_hat = st.v / (1 - self.beta2 ** st.step)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(param, grad, state: AdamState, config: TrainConfig):
    """Functional single Adam update; returns the new parameter and state."""
    opt = Adam.from_config(config)
    opt.state["p"] = AdamState(state.m.copy(), state.v.copy(), state.step)
    p = np.array(param, dtype=np.float64, copy=True)
    opt.step("p", p, np.asarray(grad, dtype=np.float64))
    return p, opt.state["p"]


def penalty(model: Model) -> float:
    return float(sum(np.sum(np.square(l.params[k], dtype=np.float64)) for l, k in model.penalized()))


def loss_eval(model: Model, X, Y, reg_weight: float = 0.0, *, training: bool = False,
              backward: bool = False) -> float:
    """Mean squared-norm error plus ``reg_weight`` times the weight/bias penalty.

    With ``backward=True`` the gradients of this loss are left in the layers.
    """
    X = np.asarray(X)
    if len(X) == 0:
        raise ValueError("loss of an empty batch is undefined")
    pred = model.forward(X, training)
    err = pred - np.asarray(Y, dtype=pred.dtype).reshape(pred.shape)
    data = float(np.sum(np.square(err, dtype=np.float64)) / len(X))
    if backward:
        model.backward(err * (2.0 / len(X)))
        if reg_weight:
            for layer, k in model.penalized():
                layer.grads[k] = layer.grads[k] + 2.0 * reg_weight * layer.params[k]
    return data + reg_weight * penalty(model) if reg_weight else data


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def extend(self, other: "History") -> "History":
        return History(self.train_loss + other.train_loss, self.val_loss + other.val_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(a), repr(b)])

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.train_loss.append(float(row["train_loss"]))
                h.val_loss.append(float(row["val_loss"]))
        return h


def batch_slices(n: int, batch_size: int, min_last: int = 1) -> list[slice]:
    """Consecutive batches; a last batch smaller than ``min_last`` joins the previous one."""
    edges = list(range(0, n, batch_size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] < min_last:
        del edges[-2]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _as_arrays(data):
    if data is None:
        return None
    if hasattr(data, "X") and hasattr(data, "Y"):
        return data.X, data.Y
    X, Y = data
    return X, Y


def thread_limit(deterministic: bool, threads: int | None = None):
    """Context capping BLAS threads (to one when determinism is requested)."""
    if deterministic:
        threads = 1
    return threadpool_limits(threads) if threads else contextlib.nullcontext()


def evaluate_loss(model: Model, X, Y, reg_weight: float, *, training: bool, batch_size: int) -> float:
    """Sample-weighted loss over a whole set, evaluated in batches."""
    min_last = 2 if training and model.batch_norms() else 1
    total = 0.0
    for sl in batch_slices(len(X), batch_size, min_last):
        total += loss_eval(model, X[sl], Y[sl], 0.0, training=training) * (sl.stop - sl.start)
    return total / len(X) + reg_weight * penalty(model)


def train(model: Model, train_set, val_set=None, config: TrainConfig | None = None, *,
          optimizer: Adam | None = None,
          on_epoch_end: Callable[[int, Model, History], None] | None = None) -> History:
    """Train ``model`` in place on normalized data and return the loss history.

    ``train_set``/``val_set`` are Dataset objects or ``(X, Y)`` pairs.
    Passing an existing ``optimizer`` continues its moment estimates.
    Validation losses use batch statistics for BN layers; population
    statistics are set from the training inputs after the final epoch.
    """
    config = config or TrainConfig()
    X, Y = _as_arrays(train_set)
    X = np.asarray(X, dtype=model.dtype)
    Y = np.asarray(Y, dtype=model.dtype)
    val = _as_arrays(val_set)
    if val is not None:
        val = (np.asarray(val[0], dtype=model.dtype), np.asarray(val[1], dtype=model.dtype))
    if len(X) == 0:
        raise ValueError("training set is empty")
    unknown = config.frozen_params - set(model.parameters())
    if unknown:
        raise KeyError(f"frozen parameters not in model: {sorted(unknown)}")

    opt = optimizer or Adam.from_config(config)
    rng = np.random.default_rng([config.seed, 0x5EED])
    min_last = 2 if model.batch_norms() else 1
    history = History()
    params = model.parameters()
    trainable = [k for k in params if k not in config.frozen_params]

    with thread_limit(config.deterministic):
        for epoch in range(config.epochs):
            order = rng.permutation(len(X))
            running = 0.0
            for b, sl in enumerate(batch_slices(len(X), config.batch_size, min_last)):
                idx = order[sl]
                loss = loss_eval(model, X[idx], Y[idx], config.reg_weight, training=True, backward=True)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, b, loss)
                running += loss * len(idx)
                grads = model.gradients()
                for name in trainable:
                    opt.step(name, params[name], grads[name].astype(model.dtype, copy=False))
            history.train_loss.append(running / len(X))
            if val is not None:
                history.val_loss.append(evaluate_loss(model, *val, config.reg_weight, training=True,
                                                      batch_size=config.batch_size))
            else:
                history.val_loss.append(float("nan"))
            log.info("epoch %d train %.6g val %.6g", epoch + 1, history.train_loss[-1], history.val_loss[-1])
            if on_epoch_end is not None:
                on_epoch_end(epoch + 1, model, history)
        if model.batch_norms() and config.epochs > 0:
            model.finalize_statistics(X)
    return history
