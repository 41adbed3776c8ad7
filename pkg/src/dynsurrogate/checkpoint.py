"""Binary checkpoints and JSON model descriptions."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn import BatchNorm, Model, Sparse, layer_from_spec

CHECKPOINT_MAGIC = b"NCK1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, model: Model, frozen=()) -> None:
    """Write every parameter and any finalized BN statistics as float64.

    Parameters named in ``frozen`` and BN statistics get trainable flag 0.
    """
    frozen = set(frozen)
    entries = [(name, arr, name not in frozen) for name, arr in model.parameters().items()]
    for bn in model.batch_norms():
        if bn.finalized:
            entries += [(f"{bn.name}.{k}", v, False) for k, v in bn.stats.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(model.layers)))
        for name, arr, trainable in entries:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", int(trainable), arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[int, dict[str, tuple[np.ndarray, bool]]]:
    """Return ``(layer_count, {name: (array, trainable)})``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        while pos < len(data):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode()
            pos += ln
            trainable, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated data for {name}")
            arr = np.frombuffer(data, "<f8", count, pos).reshape(dims).copy()
            pos += 8 * count
            out[name] = (arr, bool(trainable))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return n_layers, out


def load_checkpoint(model: Model, path) -> set[str]:
    """Copy checkpoint values into ``model``; returns names stored as non-trainable."""
    n_layers, entries = read_checkpoint(path)
    if n_layers != len(model.layers):
        raise CheckpointError(f"checkpoint has {n_layers} layers, model has {len(model.layers)}")
    params = model.parameters()
    missing = set(params) - set(entries)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    for name, (arr, _) in entries.items():
        layer_name, key = name.rsplit(".", 1)
        layer = model.layer(layer_name)
        target = layer.params.get(key)
        if target is None and isinstance(layer, BatchNorm):
            target = layer.stats.get(key)
        if target is None:
            raise CheckpointError(f"unknown checkpoint entry {name}")
        if target.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} in checkpoint, {target.shape} in model")
        target[...] = arr
    for bn in model.batch_norms():
        bn.finalized = all(f"{bn.name}.{k}" in entries for k in bn.stats)
    for layer in model.layers:
        if isinstance(layer, Sparse) and np.any(layer.params["W"][~layer.mask]):
            raise CheckpointError(f"{layer.name}: checkpoint has weights outside the mask")
    return {n for n, (_, t) in entries.items() if not t and n in params}


# ---------------------------------------------------------------------------
# Model description
# ---------------------------------------------------------------------------


def encode_mask(mask: np.ndarray) -> dict:
    from .sparsify import describe_mask

    desc = describe_mask(mask)
    if desc is not None:
        return desc
    return {"kind": "packed", "shape": list(mask.shape), "bits": np.packbits(mask).tobytes().hex()}


def decode_mask(desc: dict) -> np.ndarray:
    from .sparsify import structured_mask

    kind = desc["kind"]
    if kind == "packed":
        r, c = desc["shape"]
        bits = np.frombuffer(bytes.fromhex(desc["bits"]), np.uint8)
        return np.unpackbits(bits, count=r * c).reshape(r, c).astype(bool)
    if kind == "lower_triangular":
        return structured_mask("lower_triangular", desc["n"])
    if kind == "banded_lower":
        return structured_mask("banded_lower", desc["n"], desc["band_width"])
    raise ValueError(f"unknown mask encoding {kind!r}")


def model_to_json(model: Model) -> dict:
    spec = model.spec()
    for layer in spec["layers"]:
        if "mask" in layer:
            layer["mask"] = encode_mask(layer["mask"])
    return spec


def model_from_json(doc: dict) -> Model:
    layers = []
    for rec in doc["layers"]:
        rec = dict(rec)
        if "mask" in rec:
            rec["mask"] = decode_mask(rec["mask"])
        layers.append(layer_from_spec(rec))
    return Model(layers, doc["n_in"], doc.get("dtype", "float32"))


def save_model(model: Model, json_path, checkpoint_path=None, frozen=()) -> None:
    Path(json_path).write_text(json.dumps(model_to_json(model), indent=1))
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, model, frozen)


def load_model(json_path, checkpoint_path=None) -> Model:
    try:
        doc = json.loads(Path(json_path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{json_path}: invalid model description ({exc})") from exc
    model = model_from_json(doc)
    if checkpoint_path is not None:
        load_checkpoint(model, checkpoint_path)
    return model
