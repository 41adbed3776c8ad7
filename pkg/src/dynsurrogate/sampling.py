"""Load dataspaces, Latin-hypercube designs, dataset generation and storage.

Random streams are counter based: every quantity is a hash of
(seed, split, dimension, sample index), so a dataset of any size is a prefix
of a larger one drawn with the same seed, and rows can be generated in any
order or in parallel.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .dynamics import (
    TWO_PI,
    HarmonicLoadParams,
    MdofParams,
    NewtonConvergenceError,
    SdofParams,
    TimeGrid,
    eval_load,
    mdof_linear_response,
    mdof_newmark_response,
    sdof_linear_response,
    sdof_newmark_response,
)

DEFAULT_EPS = 1e-8
DATASET_MAGIC = b"NDS1"
STATS_MAGIC = b"NST1"
FORMAT_VERSION = 1


class Split(IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2


def as_split(split: Split | str | int) -> Split:
    if isinstance(split, str):
        return Split[split.upper()]
    return Split(split)


class DatasetFormatError(ValueError):
    """Base class for malformed dataset or statistics files."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


# ---------------------------------------------------------------------------
# Counter-based hashing
# ---------------------------------------------------------------------------


def _mix64(x):
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def hash_key(*parts: int):
    """Combine integers into one 64-bit key (broadcasts over arrays)."""
    h = np.uint64(0x243F6A8885A308D3)
    for p in parts:
        p = np.asarray(p).astype(np.uint64)
        h = _mix64(h ^ _mix64(p))
    return h


def _uniform01(key) -> np.ndarray:
    """Map 64-bit hashes to floats in [0, 1) with 53 random bits."""
    return (np.asarray(key, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _keyed_permutation(idx: np.ndarray, n: int, key: int, rounds: int = 6) -> np.ndarray:
    """Image of ``idx`` under a pseudo-random bijection of ``range(n)``.

    Balanced Feistel network on the smallest even-width bit domain covering
    ``n``, with cycle walking to stay inside the range.
    """
    idx = np.asarray(idx, dtype=np.uint64)
    if n <= 1:
        return np.zeros_like(idx)
    bits = max(2, int(np.ceil(np.log2(n))))
    bits += bits % 2
    half = bits // 2
    lo_mask = np.uint64((1 << half) - 1)
    key = np.uint64(key)

    def encrypt(x):
        left, right = x >> np.uint64(half), x & lo_mask
        for r in range(rounds):
            f = hash_key(key, r, right) & lo_mask
            left, right = right, left ^ f
        return (left << np.uint64(half)) | right

    out = encrypt(idx)
    bad = out >= np.uint64(n)
    while np.any(bad):
        out[bad] = encrypt(out[bad])
        bad = out >= np.uint64(n)
    return out


def lhs_sample(n_samples: int, n_dims: int, seed: int, rows=None) -> np.ndarray:
    """Latin-hypercube design in the unit cube.

    Column ``d`` places row ``i`` in stratum ``perm_d(i)`` of ``n_samples``
    equal strata and jitters it uniformly inside. ``rows`` selects a subset of
    the design rows without generating the rest.
    """
    if n_samples < 1 or n_dims < 1:
        raise ValueError("n_samples and n_dims must be >= 1")
    rows = np.arange(n_samples) if rows is None else np.asarray(rows)
    if rows.size and (rows.min() < 0 or rows.max() >= n_samples):
        raise ValueError("row index outside the design")
    out = np.empty((rows.size, n_dims))
    for d in range(n_dims):
        strata = _keyed_permutation(rows, n_samples, hash_key(seed, d, 0x5EED))
        jitter = _uniform01(hash_key(seed, d, rows, 0x717E))
        out[:, d] = (strata.astype(np.float64) + jitter) / n_samples
    # Guard the top stratum against rounding up to exactly 1.
    return np.minimum(out, np.nextafter(1.0, 0.0))


# ---------------------------------------------------------------------------
# Dataspaces
# ---------------------------------------------------------------------------

GRID_SHORT = TimeGrid(duration=5.0, obs_step=0.05, fine_step=1e-3)
GRID_LONG = TimeGrid(duration=20.0, obs_step=0.1, fine_step=1e-3)


@dataclass(frozen=True)
class Dataspace:
    case_id: int
    n_terms: int
    amp_range: tuple[float, float]
    freq_range: tuple[float, float]
    grid: TimeGrid
    system: SdofParams | MdofParams
    response_kind: str = "displacement"
    response_dof: int = 6
    phase_range: tuple[float, float] = (0.0, TWO_PI)
    sizes: dict = field(default_factory=lambda: {"train": 2**18, "val": 5000, "test": 5000})

    def __post_init__(self):
        for lo, hi in (self.amp_range, self.freq_range, self.phase_range):
            if lo > hi:
                raise ValueError("dataspace ranges must satisfy lo <= hi")
        if self.response_kind not in ("displacement", "acceleration"):
            raise ValueError(f"unknown response kind {self.response_kind!r}")
        if any(v <= 0 for v in self.sizes.values()):
            raise ValueError("split sizes must be positive")

    @property
    def is_mdof(self) -> bool:
        return isinstance(self.system, MdofParams)

    @property
    def n_points(self) -> int:
        return self.grid.n_points

    def size(self, split: Split | str) -> int:
        return self.sizes[as_split(split).name.lower()]


_CASE_TABLE = {
    # case: (N_p, amplitude hi, frequency hi, grid, n_train)
    1: (5, 10.0, 6 * np.pi, GRID_SHORT, 2**18),
    2: (25, 10.0, 6 * np.pi, GRID_SHORT, 2**18),
    3: (5, 10.0, 6 * np.pi, GRID_LONG, 2**18),
    4: (25, 10.0, 6 * np.pi, GRID_LONG, 2**18),
    5: (25, 20.0, 6 * np.pi, GRID_LONG, 2**20),
    6: (25, 4.0, 20 * np.pi, GRID_LONG, 2**20),
    7: (25, 4.0, 10 * np.pi, GRID_LONG, 2**20),
}

CASE6_SUBRANGES = ((0.0, 10 * np.pi), (10 * np.pi, 15 * np.pi), (15 * np.pi, 20 * np.pi))


def dataspace(case: int, response: str = "displacement", *, cubic_ratio: float | None = None,
              freq_range: tuple[float, float] | None = None) -> Dataspace:
    """Dataspace for cases 1-7.

    Cases 5 and 7 default to the strongest cubic spring, ``b = k``; pass
    ``cubic_ratio`` to pick another. ``freq_range`` overrides the frequency
    range (used for the three Case-6 sub-ranges).
    """
    if case not in _CASE_TABLE:
        raise ValueError(f"unknown case {case}; expected 1..7")
    n_terms, amp_hi, w_hi, grid, n_train = _CASE_TABLE[case]
    if case in (5, 7):
        ratio = 1.0 if cubic_ratio is None else cubic_ratio
    else:
        if cubic_ratio not in (None, 0.0):
            raise ValueError(f"case {case} is linear")
        ratio = 0.0
    system = MdofParams.default(ratio) if case >= 6 else SdofParams.default(ratio)
    return Dataspace(
        case_id=case,
        n_terms=n_terms,
        amp_range=(0.0, amp_hi),
        freq_range=freq_range or (0.0, w_hi),
        grid=grid,
        system=system,
        response_kind=response,
        sizes={"train": n_train, "val": 5000, "test": 5000},
    )


def case6_subspaces(response: str = "displacement") -> list[Dataspace]:
    return [dataspace(6, response, freq_range=r) for r in CASE6_SUBRANGES]


def draw_load_params(space: Dataspace, unit_rows: np.ndarray) -> HarmonicLoadParams:
    """Affine map of unit-cube rows ``[a_1..a_Np, w_1..w_Np, phi_1..phi_Np]``."""
    u = np.asarray(unit_rows, dtype=np.float64)
    npk = space.n_terms
    if u.shape[-1] != 3 * npk:
        raise ValueError(f"unit row length {u.shape[-1]} != 3 * N_p = {3 * npk}")

    def affine(x, rng):
        return rng[0] + x * (rng[1] - rng[0])

    return HarmonicLoadParams(
        affine(u[..., :npk], space.amp_range),
        affine(u[..., npk:2 * npk], space.freq_range),
        affine(u[..., 2 * npk:], space.phase_range),
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    case_id: int
    seed: int
    split: Split
    n_terms: int

    def __post_init__(self):
        if self.X.shape != self.Y.shape or self.X.ndim != 2:
            raise ValueError("X and Y must be 2-D arrays of equal shape")
        self.split = Split(self.split)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_points(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], Y=self.Y[idx])


def split_seed(seed: int, split: Split) -> int:
    return int(hash_key(seed, int(split), 0xDA7A))


def sample_loads(space: Dataspace, split: Split | str, seed: int, rows) -> HarmonicLoadParams:
    """Load parameters of the given dataset rows (reproducible in isolation)."""
    split = as_split(split)
    rows = np.asarray(rows)
    design = max(space.size(split), int(rows.max()) + 1 if rows.size else 1)
    unit = lhs_sample(design, 3 * space.n_terms, split_seed(seed, split), rows=rows)
    return draw_load_params(space, unit)


def compute_responses(space: Dataspace, loads: HarmonicLoadParams, *, chunk: int = 2048) -> np.ndarray:
    """Configured response series for a batch of loads, shape (N, n)."""
    n = loads.batch_shape[0]
    out = np.empty((n, space.n_points))
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        part = loads[sl]
        try:
            res = _solve(space, part)
        except NewtonConvergenceError as err:
            sample = None if err.sample is None else start + err.sample
            raise NewtonConvergenceError(err.step, sample, err.residual) from err
        out[sl] = res.displacement if space.response_kind == "displacement" else res.acceleration
    return out


def _solve(space: Dataspace, loads: HarmonicLoadParams):
    sys_ = space.system
    if space.is_mdof:
        if sys_.is_linear:
            return mdof_linear_response(sys_, loads, space.grid, space.response_dof)
        return mdof_newmark_response(sys_, loads, space.grid, space.response_dof)
    if sys_.is_linear:
        return sdof_linear_response(sys_, loads, space.grid)
    return sdof_newmark_response(sys_, loads, space.grid)


def generate_dataset(space: Dataspace, split: Split | str, seed: int,
                     size_override: int | None = None) -> Dataset:
    """Sample loads by Latin hypercube and solve for the configured response.

    The design size is the nominal split size from the dataspace, so
    ``size_override`` returns a prefix of the nominal dataset.
    """
    split = as_split(split)
    size = space.size(split) if size_override is None else int(size_override)
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    rows = np.arange(size)
    loads = sample_loads(space, split, seed, rows)
    X = eval_load(loads, space.grid.times)
    Y = compute_responses(space, loads)
    return Dataset(X, Y, space.case_id, seed, split, space.n_terms)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError("mean and variance must be 1-D arrays of equal length")
        if np.any(self.var < 0):
            raise ValueError("variances must be non-negative")

    def __len__(self):
        return self.mean.size

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(self.var + self.eps)


def _stats(A: np.ndarray, eps: float) -> NormStats:
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    mu = A.mean(axis=0)
    return NormStats(mu, np.mean((A - mu) ** 2, axis=0), eps)


def compute_norm_stats(train: Dataset, eps: float = DEFAULT_EPS) -> tuple[NormStats, NormStats]:
    """Per-component mean and biased variance of the training inputs and outputs."""
    return _stats(train.X, eps), _stats(train.Y, eps)


def normalize(data: np.ndarray, stats: NormStats, direction: str = "forward") -> np.ndarray:
    data = np.asarray(data)
    if data.shape[-1] != len(stats):
        raise ValueError(f"data has {data.shape[-1]} components, statistics have {len(stats)}")
    if direction == "forward":
        return (data - stats.mean) / stats.scale
    if direction == "inverse":
        return data * stats.scale + stats.mean
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_DS_HEADER = struct.Struct("<4sIIIQQIQ")
_ST_HEADER = struct.Struct("<4sQ")


def write_dataset(path, ds: Dataset) -> None:
    N, n = ds.X.shape
    header = _DS_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, ds.case_id, int(ds.split), N, n,
                             ds.n_terms, ds.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.Y, dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: not a dataset file (bad magic)")
    if len(raw) < _DS_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, case_id, split, N, n, n_terms, seed = _DS_HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = _DS_HEADER.size + 2 * 8 * N * n
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(raw) - _DS_HEADER.size} bytes, "
                                    f"header implies {expected - _DS_HEADER.size}")
    body = np.frombuffer(raw, dtype="<f8", offset=_DS_HEADER.size)
    X = body[:N * n].reshape(N, n).astype(np.float64)
    Y = body[N * n:].reshape(N, n).astype(np.float64)
    return Dataset(X, Y, case_id, seed, Split(split), n_terms)


def write_norm_stats(path, stats: NormStats) -> None:
    with open(path, "wb") as fh:
        fh.write(_ST_HEADER.pack(STATS_MAGIC, len(stats)))
        fh.write(stats.mean.astype("<f8").tobytes())
        fh.write(stats.var.astype("<f8").tobytes())
        fh.write(struct.pack("<d", stats.eps))


def read_norm_stats(path) -> NormStats:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != STATS_MAGIC:
        raise BadMagicError(f"{path}: not a statistics file (bad magic)")
    if len(raw) < _ST_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, n = _ST_HEADER.unpack_from(raw)
    if len(raw) != _ST_HEADER.size + 8 * (2 * n + 1):
        raise TruncatedPayloadError(f"{path}: payload length does not match n = {n}")
    body = np.frombuffer(raw, dtype="<f8", offset=_ST_HEADER.size)
    return NormStats(body[:n].copy(), body[n:2 * n].copy(), float(body[2 * n]))


def export_sample_csv(path, space: Dataspace, load: HarmonicLoadParams) -> None:
    """Write one load realization and both response channels: t, p, u, a."""
    if load.amplitudes.ndim != 1:
        raise ValueError("export_sample_csv expects a single load realization")
    t = space.grid.times
    p = eval_load(load, t)
    both = _solve(space, load[None])
    u, a = both.displacement[0], both.acceleration[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p", "u", "a"])
        for row in zip(t, p, u, a):
            w.writerow([repr(float(v)) for v in row])
