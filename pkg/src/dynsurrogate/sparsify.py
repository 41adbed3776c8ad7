"""Magnitude sparsity analysis, FC-to-SC transfer and network growth."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import BatchNorm, Conv1D, Dense, Model, Sparse, init_params
from .sampling import hash_key
from .training import Adam, History, TrainConfig, _as_arrays, evaluate_loss, train

log = logging.getLogger(__name__)

MASK_MAGIC = b"NMK1"
DEFAULT_RATIO = 0.05
DEFAULT_FILTERS = 16


# ---------------------------------------------------------------------------
# Sparsity analysis
# ---------------------------------------------------------------------------


@dataclass
class SparsityReport:
    threshold: float
    nnz: int
    lower_fraction: float
    band_width: int
    kind: str
    #: surviving weights per diagonal offset i - j, starting at ``min_offset``
    histogram: list[int] = field(default_factory=list)
    min_offset: int = 0

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "nnz": self.nnz,
            "lower_fraction": self.lower_fraction,
            "band_width": self.band_width,
            "histogram": {"min_offset": self.min_offset, "counts": self.histogram},
            "kind": self.kind,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _offsets(mask):
    i, j = np.nonzero(mask)
    return i - j


def fit_structure(mask: np.ndarray, lower_cut: float = 0.99, span_cut: float = 0.9,
                  band_quantile: float = 99.0) -> tuple[str, int]:
    """Pick the structured mask that best explains a magnitude mask.

    Lower triangular when nearly all survivors sit on or below the diagonal
    and reach far from it; otherwise a lower band covering the
    ``band_quantile`` percentile of below-diagonal offsets.
    """
    n = mask.shape[0]
    d = _offsets(mask)
    if d.size == 0:
        return "banded_lower", 0
    lower = np.mean(d >= 0)
    if lower >= lower_cut and d.max() >= span_cut * n:
        return "lower_triangular", n - 1
    below = d[d >= 0]
    w = int(np.ceil(np.percentile(below, band_quantile))) if below.size else 0
    return "banded_lower", min(w, n - 1)


def sparsity_mask(W, ratio: float = DEFAULT_RATIO) -> tuple[np.ndarray, SparsityReport]:
    """Keep weights with ``|w| >= ratio * max|W|``."""
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ValueError("weight matrix is empty")
    wmax = np.abs(W).max()
    if wmax == 0:
        raise ValueError("all-zero weight matrix: relative threshold is undefined")
    threshold = ratio * wmax
    mask = np.abs(W) >= threshold
    d = _offsets(mask)
    lo = -(W.shape[1] - 1)
    hist = np.bincount(d - lo, minlength=W.shape[0] + W.shape[1] - 1)
    kind, band = fit_structure(mask) if W.shape[0] == W.shape[1] else ("none", -1)
    report = SparsityReport(float(threshold), int(mask.sum()), float(np.mean(d >= 0)),
                            band, kind, hist.tolist(), lo)
    return mask, report


def structured_mask(kind: str, n: int, band_width: int | None = None) -> np.ndarray:
    if n < 1:
        raise ValueError("mask size must be positive")
    i, j = np.indices((n, n))
    if kind == "lower_triangular":
        return i >= j
    if kind == "banded_lower":
        if band_width is None or not 0 <= band_width < n:
            raise ValueError(f"band width must lie in [0, {n - 1}], got {band_width}")
        return (i - j >= 0) & (i - j <= band_width)
    raise ValueError(f"unknown mask kind {kind!r}")


def describe_mask(mask: np.ndarray) -> dict | None:
    """Compact descriptor when ``mask`` is a structured mask, else None."""
    r, c = mask.shape
    if r != c:
        return None
    if np.array_equal(mask, structured_mask("lower_triangular", r)):
        return {"kind": "lower_triangular", "n": r}
    d = _offsets(mask)
    if d.size and d.min() >= 0:
        w = int(d.max())
        if np.array_equal(mask, structured_mask("banded_lower", r, w)):
            return {"kind": "banded_lower", "n": r, "band_width": w}
    return None


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<QQ", *mask.shape))
        fh.write(np.packbits(mask, axis=None).tobytes())


def read_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file")
    r, c = struct.unpack_from("<QQ", data, 4)
    bits = np.frombuffer(data, np.uint8, offset=20)
    if bits.size * 8 < r * c:
        raise ValueError(f"{path}: truncated mask payload")
    return np.unpackbits(bits, count=r * c).reshape(r, c).astype(bool)


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------


def build_sc_from_fc(fc: Dense, mask, name: str | None = None) -> Sparse:
    """Sparse layer carrying the masked weights and the biases of a trained dense layer."""
    W = fc.params["W"]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != W.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weights {W.shape}")
    sc = Sparse(mask, fc.activation, name=name or fc.name)
    sc.build(fc.in_shape, W.dtype)
    sc.set_weights(W, fc.params["b"])
    return sc


def conv_stack(n_l: int, n_c: int = DEFAULT_FILTERS) -> list:
    """CONV(f=2, relu) blocks separated by BN, closed by BN and a 1x1 linear CONV."""
    if n_l < 1:
        raise ValueError("a convolutional stack needs n_l >= 1")
    layers = [Conv1D(n_c, 2, "relu")]
    for _ in range(n_l - 1):
        layers += [BatchNorm(), Conv1D(n_c, 2, "relu")]
    layers += [BatchNorm(), Conv1D(1, 1, "linear")]
    return layers


def _transfer(model: Model, layer_name: str, source) -> None:
    target = model.layer(layer_name)
    src = source.params if hasattr(source, "params") else dict(zip(("W", "b"), source))
    for k, v in src.items():
        if target.params[k].shape != np.shape(v):
            raise ValueError(f"{layer_name}.{k}: transferred shape {np.shape(v)} != {target.params[k].shape}")
        target.params[k][...] = v
    if isinstance(target, Sparse):
        target.params["W"] *= target.mask


def build_sparse_template(n: int, n_l: int, sc_mask, sc_params=None, *, n_c: int = DEFAULT_FILTERS,
                          seed: int = 0, dtype=np.float32) -> Model:
    """Conv stack followed by a linear sparse output layer.

    ``sc_params`` (a layer or ``(W, b)``) initializes the sparse layer;
    everything else gets fresh initial values.
    """
    sc = Sparse(sc_mask, "linear", name="sc")
    model = Model(conv_stack(n_l, n_c) + [sc], n, dtype)
    init_params(model, seed)
    if sc_params is not None:
        _transfer(model, "sc", sc_params)
    return model


def build_conv_dense_template(n: int, n_l: int, n_fc_remaining: int, fc_params=(), *,
                              n_c: int = DEFAULT_FILTERS, seed: int = 0, dtype=np.float32) -> Model:
    """Conv stack in place of the first dense layer, then ``n_fc_remaining`` dense layers.

    ``fc_params`` optionally lists trained layers (or ``(W, b)`` pairs) for
    the retained dense layers, in order. ``n_l = 0`` leaves only the dense layers.
    """
    if n_fc_remaining < 1:
        raise ValueError("at least one dense layer must remain")
    fcs = [Dense(n, "relu" if i < n_fc_remaining - 1 else "linear", name=f"fc{i}") for i in range(n_fc_remaining)]
    layers = (conv_stack(n_l, n_c) if n_l > 0 else []) + fcs
    model = Model(layers, n, dtype)
    init_params(model, seed)
    for fc, src in zip(fcs, fc_params):
        _transfer(model, fc.name, src)
    return model


def conv_block_count(model: Model) -> int:
    return len(model.batch_norms())


def insert_bn_conv(model: Model, *, n_c: int | None = None, seed: int = 0) -> tuple[Model, list[str]]:
    """Copy of ``model`` with a CONV(f=2, relu) + BN pair right after the first BN.

    Returns the grown model and the names of the inserted layers, which are
    freshly initialized; all other parameter arrays are copied unchanged.
    """
    bns = model.batch_norms()
    if not bns:
        raise ValueError("model has no BN layer to grow from")
    grown = model.copy()
    first = grown.batch_norms()[0]
    pos = grown.layers.index(first) + 1
    n_c = n_c or first.in_shape[1]
    new = [Conv1D(n_c, 2, "relu"), BatchNorm(first.param_mode, first.eps)]
    grown.insert(pos, new)
    names = [l.name for l in new]
    init_params(grown, seed, layers=names)
    return grown, names


# ---------------------------------------------------------------------------
# Two-phase training and growth
# ---------------------------------------------------------------------------


@dataclass
class PhaseSplit:
    new_only: int
    all_layers: int

    @classmethod
    def halves(cls, epochs: int) -> "PhaseSplit":
        return cls(epochs // 2, epochs - epochs // 2)


def two_phase_train(model: Model, new_layer_names, train_set, val_set, config: TrainConfig,
                    phase_split: PhaseSplit | tuple[int, int] | None = None) -> History:
    """Train only the new layers, then everything, sharing one Adam instance.

    Moment estimates of the new layers carry into the second phase; the
    other parameters have no state yet and start fresh when released.
    """
    new_layer_names = set(new_layer_names)
    if not new_layer_names:
        raise ValueError("no new layers given")
    unknown = new_layer_names - {l.name for l in model.layers}
    if unknown:
        raise KeyError(f"unknown layers {sorted(unknown)}")
    if phase_split is None:
        phase_split = PhaseSplit.halves(config.epochs)
    elif not isinstance(phase_split, PhaseSplit):
        phase_split = PhaseSplit(*phase_split)
    new_params = model.layer_params(new_layer_names)
    old_params = set(model.parameters()) - new_params
    opt = Adam.from_config(config)
    history = History()
    if phase_split.new_only:
        cfg1 = config.with_(epochs=phase_split.new_only, frozen_params=old_params | config.frozen_params,
                            seed=hash_key(config.seed, 1) & 0x7FFFFFFF)
        history = history.extend(train(model, train_set, val_set, cfg1, optimizer=opt))
    if phase_split.all_layers:
        cfg2 = config.with_(epochs=phase_split.all_layers)
        history = history.extend(train(model, train_set, val_set, cfg2, optimizer=opt))
    return history


@dataclass
class GrowthStep:
    n_l: int
    new_layers: list[str]
    loss_before: float
    loss_after: float
    history: History

    @property
    def ratio(self) -> float:
        return self.loss_after / self.loss_before

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("history")
        d["ratio"] = self.ratio
        return d


def training_mse(model: Model, train_set, batch_size: int = 4096) -> float:
    """Evaluation-phase data loss over the full training set."""
    X, Y = _as_arrays(train_set)
    return evaluate_loss(model, np.asarray(X, model.dtype), np.asarray(Y, model.dtype), 0.0,
                         training=False, batch_size=batch_size)


def grow(model: Model, target_n_l: int, train_set, val_set, config: TrainConfig,
         phase_split=None, *, n_c: int | None = None, seed: int = 0) -> tuple[Model, list[GrowthStep]]:
    """Insert BN-CONV blocks one at a time until the stack has ``target_n_l`` blocks."""
    if not model.finalized:
        raise ValueError("model must be trained (BN statistics finalized) before growing")
    steps = []
    while conv_block_count(model) < target_n_l:
        before = training_mse(model, train_set)
        model, names = insert_bn_conv(model, n_c=n_c, seed=hash_key(seed, conv_block_count(model)) & 0x7FFFFFFF)
        hist = two_phase_train(model, names, train_set, val_set, config, phase_split)
        after = training_mse(model, train_set)
        steps.append(GrowthStep(conv_block_count(model), names, before, after, hist))
        log.info("grew to n_l=%d: training loss %.4g -> %.4g", steps[-1].n_l, before, after)
    return model, steps
