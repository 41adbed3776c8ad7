"""Layer kit: dense, masked (sparse) dense, 1-D convolution and batch norm.

Batches are NumPy arrays with the sample axis first. Vector layers take
``(N, n)`` arrays; convolution and batch norm take ``(N, height, channels)``.
:class:`Model` inserts the reshapes between the two (a vector is a
one-channel tensor) and flattens a one-channel output back to a vector.

Every layer caches what it needs during ``forward`` and writes parameter
gradients into ``layer.grads`` during ``backward``.
"""
from __future__ import annotations

import copy
import zlib

import numpy as np

ACTIVATIONS = ("linear", "relu")


class ShapeError(ValueError):
    pass


class StatisticsNotFinalizedError(RuntimeError):
    pass


def relu(x):
    return np.maximum(x, 0)


class Layer:
    kind = "layer"
    #: parameter names covered by the L2 penalty
    penalized: tuple[str, ...] = ()

    def __init__(self, name: str | None = None):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None
        self._cache = None

    # shape handling -----------------------------------------------------
    def output_shape(self, in_shape):
        return in_shape

    def build(self, in_shape, dtype=np.float64):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self.output_shape(self.in_shape))
        self._allocate(dtype)
        return self.out_shape

    def _allocate(self, dtype):
        pass

    def astype(self, dtype):
        for d in (self.params, self.grads):
            for k in d:
                d[k] = d[k].astype(dtype)

    # parameters ---------------------------------------------------------
    def init(self, rng: np.random.Generator):
        pass

    def trainable_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def listed_count(self) -> int:
        return self.trainable_count()

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def __repr__(self):
        fields = ", ".join(f"{k}={v}" for k, v in self.spec().items() if k not in ("kind", "mask"))
        return f"{type(self).__name__}({fields})"


class Dense(Layer):
    """Fully connected layer ``h = W x + b`` with W of shape (out, in)."""

    kind = "fc"
    penalized = ("W", "b")

    def __init__(self, n_out: int, activation: str = "linear", name: str | None = None):
        super().__init__(name)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_out = int(n_out)
        self.activation = activation

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"{self.name}: dense layer needs a vector input, got {in_shape}")
        return (self.n_out,)

    def _allocate(self, dtype):
        self.params = {"W": np.zeros((self.n_out, self.in_shape[0]), dtype),
                       "b": np.zeros(self.n_out, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def fan_in(self) -> np.ndarray:
        return np.full(self.n_out, self.in_shape[0])

    def init(self, rng):
        W = self.params["W"]
        std = np.sqrt(2.0 / np.maximum(self.fan_in(), 1))
        W[...] = rng.standard_normal(W.shape) * std[:, None]
        self.params["b"][...] = 0.0

    def effective_weight(self):
        return self.params["W"]

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_shape[0]:
            raise ShapeError(f"{self.name}: expected (N, {self.in_shape[0]}), got {x.shape}")
        h = x @ self.effective_weight().T + self.params["b"]
        if self.activation == "relu":
            out = relu(h)
            self._cache = (x, h > 0)
        else:
            out = h
            self._cache = (x, None)
        return out

    def backward(self, g):
        x, active = self._cache
        if active is not None:
            g = g * active
        self.grads["W"] = self._mask_grad(g.T @ x)
        self.grads["b"] = g.sum(axis=0)
        return g @ self.effective_weight()

    def _mask_grad(self, gW):
        return gW

    def spec(self):
        return {"kind": self.kind, "name": self.name, "n_out": self.n_out, "activation": self.activation}


class Sparse(Dense):
    """Dense layer whose weights outside a fixed boolean mask stay zero."""

    kind = "sc"

    def __init__(self, mask, activation: str = "linear", name: str | None = None):
        mask = np.array(mask, dtype=bool)
        if mask.ndim != 2:
            raise ShapeError("mask must be a 2-D boolean matrix")
        super().__init__(mask.shape[0], activation, name)
        self.mask = mask
        self.mask.flags.writeable = False

    def output_shape(self, in_shape):
        out = super().output_shape(in_shape)
        if self.mask.shape[1] != in_shape[0]:
            raise ShapeError(f"{self.name}: mask has {self.mask.shape[1]} columns, input has {in_shape[0]}")
        return out

    def fan_in(self):
        return self.mask.sum(axis=1)

    def init(self, rng):
        super().init(rng)
        self.params["W"] *= self.mask

    def set_weights(self, W, b):
        W = np.asarray(W)
        if W.shape != self.mask.shape:
            raise ShapeError(f"{self.name}: weight shape {W.shape} does not match mask {self.mask.shape}")
        self.params["W"][...] = np.where(self.mask, W, 0.0)
        self.params["b"][...] = b

    def effective_weight(self):
        return self.params["W"] * self.mask

    def _mask_grad(self, gW):
        return gW * self.mask

    def trainable_count(self):
        return int(self.mask.sum()) + self.n_out

    def spec(self):
        d = super().spec()
        del d["n_out"]
        d["mask"] = self.mask
        return d


class Conv1D(Layer):
    """Stride-1 'same' convolution over the height axis.

    Zero padding of ``f - 1`` rows in total, ``(f-1)//2`` before and the rest
    after, keeps the output height equal to the input height.
    """

    kind = "conv"
    penalized = ("W", "b")

    def __init__(self, filters: int, filter_size: int = 2, activation: str = "relu",
                 stride: int = 1, name: str | None = None):
        super().__init__(name)
        if filter_size < 1:
            raise ValueError("filter size must be positive")
        if stride != 1:
            raise ValueError("only stride 1 is supported")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.filters = int(filters)
        self.filter_size = int(filter_size)
        self.activation = activation
        self.stride = stride

    @property
    def padding(self) -> tuple[int, int]:
        total = self.filter_size - 1
        return total // 2, total - total // 2

    def output_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.name}: convolution needs a (height, channels) input, got {in_shape}")
        return (in_shape[0], self.filters)

    def _allocate(self, dtype):
        self.params = {"W": np.zeros((self.filter_size, self.in_shape[1], self.filters), dtype),
                       "b": np.zeros(self.filters, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def init(self, rng):
        W = self.params["W"]
        fan_in = self.filter_size * self.in_shape[1]
        W[...] = rng.standard_normal(W.shape) * np.sqrt(2.0 / fan_in)
        self.params["b"][...] = 0.0

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"{self.name}: expected (N, {self.in_shape[0]}, {self.in_shape[1]}), got {x.shape}")
        H = x.shape[1]
        before, after = self.padding
        xp = np.pad(x, ((0, 0), (before, after), (0, 0))) if before or after else x
        W = self.params["W"]
        h = xp[:, 0:H, :] @ W[0]
        for k in range(1, self.filter_size):
            h += xp[:, k:k + H, :] @ W[k]
        h += self.params["b"]
        if self.activation == "relu":
            self._cache = (xp, h > 0)
            return relu(h)
        self._cache = (xp, None)
        return h

    def backward(self, g):
        xp, active = self._cache
        if active is not None:
            g = g * active
        H = g.shape[1]
        W = self.params["W"]
        gW = np.empty_like(W)
        dxp = np.zeros_like(xp)
        g2 = g.reshape(-1, g.shape[2])
        for k in range(self.filter_size):
            win = xp[:, k:k + H, :]
            gW[k] = win.reshape(-1, win.shape[2]).T @ g2
            dxp[:, k:k + H, :] += g @ W[k].T
        self.grads["W"] = gW
        self.grads["b"] = g2.sum(axis=0)
        before, _ = self.padding
        return dxp[:, before:before + H, :]

    def spec(self):
        return {"kind": self.kind, "name": self.name, "filters": self.filters,
                "filter_size": self.filter_size, "activation": self.activation, "stride": self.stride}


class BatchNorm(Layer):
    """Batch normalization over a (height, channels) volume.

    ``param_mode="per_height"`` shares scale/shift and statistics across the
    channels at each height; ``"per_element"`` keeps them per (height, channel).
    Training uses the statistics of the current batch, evaluation the
    population statistics set by :meth:`set_population_stats`.
    """

    kind = "bn"

    def __init__(self, param_mode: str = "per_height", eps: float = 1e-8, name: str | None = None):
        super().__init__(name)
        if param_mode not in ("per_height", "per_element"):
            raise ValueError(f"unknown BN parameter mode {param_mode!r}")
        if eps <= 0:
            raise ValueError("BN epsilon must be positive")
        self.param_mode = param_mode
        self.eps = eps
        self.stats: dict[str, np.ndarray] = {}
        self.finalized = False

    def output_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self.name}: batch norm needs a (height, channels) input, got {in_shape}")
        return in_shape

    @property
    def _axes(self):
        return (0, 2) if self.param_mode == "per_height" else (0,)

    @property
    def _pshape(self):
        H, C = self.in_shape
        return (H,) if self.param_mode == "per_height" else (H, C)

    def _expand(self, p):
        return p[:, None] if self.param_mode == "per_height" else p

    def _allocate(self, dtype):
        self.params = {"gamma": np.ones(self._pshape, dtype), "beta": np.zeros(self._pshape, dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.stats = {"mean": np.zeros(self._pshape, dtype), "var": np.ones(self._pshape, dtype)}
        self.finalized = False

    def astype(self, dtype):
        super().astype(dtype)
        for k in self.stats:
            self.stats[k] = self.stats[k].astype(dtype)

    def init(self, rng):
        self.params["gamma"][...] = 1.0
        self.params["beta"][...] = 0.0

    def listed_count(self):
        return self.trainable_count() + sum(s.size for s in self.stats.values())

    def group_moments(self, x):
        """Per-group mean and biased variance of a batch."""
        mu = x.mean(axis=self._axes)
        var = ((x - np.expand_dims(mu, 0) if self.param_mode == "per_element"
                else x - mu[None, :, None]) ** 2).mean(axis=self._axes)
        return mu, var

    def set_population_stats(self, mean, var):
        self.stats["mean"][...] = mean
        self.stats["var"][...] = var
        self.finalized = True

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"{self.name}: expected (N, {self.in_shape[0]}, {self.in_shape[1]}), got {x.shape}")
        gamma = self._expand(self.params["gamma"])
        beta = self._expand(self.params["beta"])
        if training:
            if x.shape[0] < 2:
                raise ValueError(f"{self.name}: training-phase batch norm needs at least 2 samples")
            mu, var = self.group_moments(x)
        else:
            if not self.finalized:
                raise StatisticsNotFinalizedError(
                    f"{self.name}: population statistics not finalized; evaluation phase unavailable")
            mu, var = self.stats["mean"], self.stats["var"]
        inv_std = 1.0 / np.sqrt(self._expand(var) + self.eps)
        xhat = (x - self._expand(mu)) * inv_std
        self._cache = (xhat, inv_std, training)
        return gamma * xhat + beta

    def backward(self, g):
        xhat, inv_std, training = self._cache
        axes = self._axes
        gamma = self._expand(self.params["gamma"])
        self.grads["gamma"] = (g * xhat).sum(axis=axes)
        self.grads["beta"] = g.sum(axis=axes)
        dxhat = g * gamma
        if not training:
            return dxhat * inv_std
        m = np.prod([g.shape[a] for a in axes])
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std * (dxhat - s1 / m - xhat * s2 / m)

    def spec(self):
        return {"kind": self.kind, "name": self.name, "param_mode": self.param_mode, "eps": self.eps}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Sparse, Conv1D, BatchNorm)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**spec)


def _is_vector_layer(layer):
    return isinstance(layer, Dense)


class Model:
    """Ordered stack of layers mapping ``(N, n_in)`` inputs to outputs.

    Shapes are checked when the model is built, so a layer sequence that does
    not chain raises :class:`ShapeError` at construction.
    """

    def __init__(self, layers, n_in: int, dtype=np.float32):
        self.n_in = int(n_in)
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = list(layers)
        self._name_layers()
        self._build()

    # construction -------------------------------------------------------
    def _name_layers(self):
        used = {l.name for l in self.layers if l.name}
        counters: dict[str, int] = {}
        for layer in self.layers:
            if layer.name:
                continue
            k = counters.get(layer.kind, 0)
            while f"{layer.kind}{k}" in used:
                k += 1
            layer.name = f"{layer.kind}{k}"
            used.add(layer.name)
            counters[layer.kind] = k + 1
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")

    def _build(self):
        shape = (self.n_in,)
        self._adapters = []
        for layer in self.layers:
            shape, adapt = self._adapt_shape(shape, layer)
            self._adapters.append(adapt)
            if layer.in_shape != shape or not layer.params:
                layer.build(shape, self.dtype)
            else:
                layer.astype(self.dtype)
            shape = layer.out_shape
        self.out_shape = shape

    @staticmethod
    def _adapt_shape(shape, layer):
        if _is_vector_layer(layer) and len(shape) == 2:
            if shape[1] != 1:
                raise ShapeError(f"{layer.name}: cannot feed a {shape[1]}-channel volume into a vector layer")
            return (shape[0],), "flatten"
        if not _is_vector_layer(layer) and len(shape) == 1:
            return (shape[0], 1), "expand"
        return shape, None

    @property
    def n_out(self) -> int:
        return int(np.prod(self.out_shape))

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def insert(self, index: int, new_layers) -> None:
        """Insert layers at ``index``; existing parameter arrays are kept."""
        self.layers[index:index] = list(new_layers)
        self._name_layers()
        self._build()

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for l in self.layers:
            l.astype(self.dtype)
        return self

    def copy(self) -> "Model":
        for l in self.layers:
            l._cache = None
        return copy.deepcopy(self)

    # parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads.items()}

    def statistics(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers if isinstance(l, BatchNorm) for k, v in l.stats.items()}

    def penalized(self) -> list[tuple[Layer, str]]:
        return [(l, k) for l in self.layers for k in l.penalized]

    def layer_params(self, layer_names) -> set[str]:
        layer_names = set(layer_names)
        return {f"{l.name}.{k}" for l in self.layers if l.name in layer_names for k in l.params}

    def batch_norms(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    @property
    def finalized(self) -> bool:
        return all(bn.finalized for bn in self.batch_norms())

    # evaluation ---------------------------------------------------------
    def forward(self, x, training: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"model expects input of shape (N, {self.n_in}), got {x.shape}")
        for layer, adapt in zip(self.layers, self._adapters):
            x = _apply_adapter(x, adapt)
            x = layer.forward(x, training)
        if x.ndim == 3 and x.shape[2] == 1:
            x = x[:, :, 0]
        return x

    __call__ = forward

    def backward(self, g):
        """Backpropagate ``d(loss)/d(output)``; fills every layer's ``grads``."""
        g = np.asarray(g, dtype=self.dtype)
        if self.layers and len(self.out_shape) == 2 and g.ndim == 2:
            g = g[:, :, None]
        for layer, adapt in zip(reversed(self.layers), reversed(self._adapters)):
            g = layer.backward(g)
            g = _undo_adapter(g, adapt)
        return g

    def finalize_statistics(self, X, chunk: int = 4096) -> None:
        """Set every BN layer's population statistics from a full pass over ``X``.

        Layers are processed in order; each BN sees activations produced with
        all earlier BN layers already in evaluation mode.
        """
        acts = [np.asarray(X[i:i + chunk], dtype=self.dtype) for i in range(0, len(X), chunk)]
        if not acts:
            raise ValueError("cannot finalize statistics on an empty dataset")
        for layer, adapt in zip(self.layers, self._adapters):
            acts = [_apply_adapter(a, adapt) for a in acts]
            if isinstance(layer, BatchNorm):
                layer.set_population_stats(*_pooled_moments(layer, acts))
            acts = [layer.forward(a, training=False) for a in acts]
            layer._cache = None

    def spec(self) -> dict:
        return {"n_in": self.n_in, "dtype": self.dtype.name, "layers": [l.spec() for l in self.layers]}

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Model(n_in={self.n_in}, [\n  {inner}\n])"


def _apply_adapter(x, adapt):
    if adapt == "expand":
        return x[:, :, None]
    if adapt == "flatten":
        return x[:, :, 0]
    return x


def _undo_adapter(g, adapt):
    if adapt == "expand":
        return g[:, :, 0]
    if adapt == "flatten":
        return g[:, :, None]
    return g


def _pooled_moments(bn: BatchNorm, chunks):
    """Mean and biased variance per BN group over a list of chunks (float64)."""
    axes = bn._axes
    count = sum(np.prod([c.shape[a] for a in axes]) for c in chunks)
    total = sum(c.astype(np.float64).sum(axis=axes) for c in chunks)
    mean = total / count
    m = bn._expand(mean)
    sq = sum(((c.astype(np.float64) - m) ** 2).sum(axis=axes) for c in chunks)
    return mean, sq / count


def model_from_spec(spec: dict) -> Model:
    return Model([layer_from_spec(s) for s in spec["layers"]], spec["n_in"], spec.get("dtype", "float32"))


# ---------------------------------------------------------------------------
# Initialization and accounting
# ---------------------------------------------------------------------------


def layer_rng(seed: int, layer_name: str) -> np.random.Generator:
    """Generator keyed on the layer name, so inserting layers leaves others unchanged."""
    return np.random.default_rng([int(seed), zlib.crc32(layer_name.encode())])


def init_params(model: Model, seed: int, layers=None) -> Model:
    """He-scaled Gaussian weights, zero biases, unit BN scales and zero shifts.

    ``layers`` restricts initialization to the named layers.
    """
    for layer in model.layers:
        if layers is None or layer.name in layers:
            layer.init(layer_rng(seed, layer.name))
    return model


def param_count(model: Model) -> dict:
    per_layer = [
        {"name": l.name, "kind": l.kind, "trainable": l.trainable_count(), "listed": l.listed_count()}
        for l in model.layers
    ]
    return {
        "layers": per_layer,
        "trainable": sum(p["trainable"] for p in per_layer),
        "total": sum(p["listed"] for p in per_layer),
    }


def dense_model(n: int, n_layers: int = 1, dtype=np.float32) -> Model:
    """``n_layers`` FC layers of width ``n``: ReLU on hidden layers, linear output."""
    if n_layers < 1:
        raise ValueError("a dense model needs at least one layer")
    layers = [Dense(n, "relu" if i < n_layers - 1 else "linear", name=f"fc{i}") for i in range(n_layers)]
    return Model(layers, n, dtype)
