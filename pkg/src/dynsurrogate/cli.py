"""Command-line workflow: data generation, training, sparsification, growth, evaluation."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .crosscheck import run_checks
from .dynamics import NewtonConvergenceError
from .evaluate import evaluate, predict, write_prediction_csv
from .nn import ShapeError, StatisticsNotFinalizedError, dense_model, init_params, param_count
from .sampling import (
    DatasetFormatError,
    Split,
    compute_norm_stats,
    dataspace,
    generate_dataset,
    normalize,
    read_dataset,
    read_norm_stats,
    write_dataset,
    write_norm_stats,
)
from .sparsify import (
    PhaseSplit,
    build_conv_dense_template,
    build_sc_from_fc,
    build_sparse_template,
    grow,
    read_mask,
    sparsity_mask,
    structured_mask,
    write_mask,
)
from .training import History, TrainConfig, thread_limit, train

log = logging.getLogger("dynsurrogate")

DEFAULTS: dict = {
    "dataspace": {"case": 1, "response": "displacement", "n_train": None, "n_val": None, "n_test": None,
                  "freq_range": None},
    "system": {"cubic_ratio": None},
    "model": {"template": "dense", "n_layers": 1, "n_l": 1, "n_c": 16, "n_fc_remaining": 4,
              "sparsity_ratio": 0.05, "dtype": "float32"},
    "train": {"reg_weight": 1e-4, "learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "batch_size": 1024, "epochs": 300, "deterministic": False, "phase_split": None},
    "paths": {"data": "data", "model": "model", "reports": "reports"},
    "seed": 0,
}

#: named desk-scale configurations (``--preset``)
PRESETS: dict = {
    "desk": {
        "dataspace": {"n_train": 8192, "n_val": 1000, "n_test": 1000},
        "train": {"epochs": 50, "batch_size": 64, "learning_rate": 3e-3, "reg_weight": 1e-3},
    },
    "desk-conv": {
        "dataspace": {"n_train": 8192, "n_val": 1000, "n_test": 1000},
        "train": {"epochs": 20, "batch_size": 256, "learning_rate": 1e-3},
    },
}

EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_FORMAT, EXIT_SHAPE, EXIT_NUMERIC = 1, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, preset: str | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, doc)
    return cfg


def _apply_flags(cfg: dict, args, mapping: dict[str, tuple[str, ...]]) -> dict:
    for attr, keys in mapping.items():
        value = getattr(args, attr, None)
        if value is None or value is False:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return cfg


FLAG_KEYS = {
    "case": ("dataspace", "case"),
    "response": ("dataspace", "response"),
    "n_train": ("dataspace", "n_train"),
    "n_val": ("dataspace", "n_val"),
    "n_test": ("dataspace", "n_test"),
    "cubic_ratio": ("system", "cubic_ratio"),
    "template": ("model", "template"),
    "n_layers": ("model", "n_layers"),
    "n_l": ("model", "n_l"),
    "n_c": ("model", "n_c"),
    "n_fc_remaining": ("model", "n_fc_remaining"),
    "ratio": ("model", "sparsity_ratio"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "learning_rate": ("train", "learning_rate"),
    "reg_weight": ("train", "reg_weight"),
    "deterministic": ("train", "deterministic"),
    "phase_split": ("train", "phase_split"),
    "data": ("paths", "data"),
    "model_dir": ("paths", "model"),
    "out": ("paths", "reports"),
    "seed": ("seed",),
}


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "phase_split"}
    return TrainConfig(seed=int(cfg["seed"]), **t)


def _space(cfg: dict):
    d = cfg["dataspace"]
    fr = tuple(d["freq_range"]) if d["freq_range"] is not None else None
    return dataspace(int(d["case"]), d["response"], cubic_ratio=cfg["system"]["cubic_ratio"], freq_range=fr)


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

SPLIT_FILES = {Split.TRAIN: "train.nds", Split.VAL: "val.nds", Split.TEST: "test.nds"}


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(2, "No such file", str(path))
    return path


def _load_split(data_dir, split: Split):
    return read_dataset(_require(Path(data_dir) / SPLIT_FILES[split]))


def _load_stats(directory):
    d = Path(directory)
    return read_norm_stats(_require(d / "x_stats.nst")), read_norm_stats(_require(d / "y_stats.nst"))


def _normalized(ds, stats):
    xs, ys = stats
    return normalize(ds.X, xs), normalize(ds.Y, ys)


def _save_model_dir(model, out_dir, stats_dir, frozen=()):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_model(model, out / "model.json", out / "model.nck", frozen)
    for name in ("x_stats.nst", "y_stats.nst"):
        src = Path(stats_dir) / name
        if src.resolve() != (out / name).resolve():
            shutil.copyfile(_require(src), out / name)


def _load_model_dir(model_dir):
    d = Path(model_dir)
    return ckpt.load_model(_require(d / "model.json"), _require(d / "model.nck"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, args) -> int:
    space = _space(cfg)
    out = Path(cfg["paths"]["data"])
    out.mkdir(parents=True, exist_ok=True)
    sizes = {Split.TRAIN: cfg["dataspace"]["n_train"], Split.VAL: cfg["dataspace"]["n_val"],
             Split.TEST: cfg["dataspace"]["n_test"]}
    train_ds = None
    for split, n in sizes.items():
        ds = generate_dataset(space, split, int(cfg["seed"]), n)
        write_dataset(out / SPLIT_FILES[split], ds)
        log.info("wrote %s (%d x %d)", out / SPLIT_FILES[split], *ds.X.shape)
        if split == Split.TRAIN:
            train_ds = ds
    xs, ys = compute_norm_stats(train_ds)
    write_norm_stats(out / "x_stats.nst", xs)
    write_norm_stats(out / "y_stats.nst", ys)
    (out / "config.json").write_text(json.dumps(cfg, indent=1))
    print(f"generated case {space.case_id} {space.response_kind} data in {out}")
    return 0


def _build_model(cfg, n: int):
    m = cfg["model"]
    dtype = np.dtype(m["dtype"])
    seed = int(cfg["seed"])
    if m["template"] == "dense":
        return init_params(dense_model(n, int(m["n_layers"]), dtype), seed)
    if m["template"] == "conv_dense":
        return build_conv_dense_template(n, int(m["n_l"]), int(m["n_fc_remaining"]), n_c=int(m["n_c"]),
                                         seed=seed, dtype=dtype)
    raise ConfigError(f"unknown model template {m['template']!r} (train builds 'dense' or 'conv_dense'; "
                      "sparse models come from build-sparse)")


def cmd_train(cfg, args) -> int:
    data = cfg["paths"]["data"]
    stats = _load_stats(data)
    tr = _normalized(_load_split(data, Split.TRAIN), stats)
    va = _normalized(_load_split(data, Split.VAL), stats)
    model = _load_model_dir(args.init_model) if args.init_model else _build_model(cfg, tr[0].shape[1])
    if model.n_in != tr[0].shape[1]:
        raise ShapeError(f"model expects {model.n_in} inputs, data has {tr[0].shape[1]}")
    tc = train_config(cfg)
    out = Path(cfg["paths"]["model"])
    every = args.checkpoint_every

    def on_epoch(epoch, m, hist):
        if every and epoch % every == 0:
            out.mkdir(parents=True, exist_ok=True)
            ckpt.write_checkpoint(out / f"epoch{epoch:04d}.nck", m)

    hist = train(model, tr, va, tc, on_epoch_end=on_epoch)
    _save_model_dir(model, out, data)
    hist.to_csv(out / "history.csv")
    last = f"final train loss {hist.train_loss[-1]:.6g}" if len(hist) else "no epochs run"
    print(f"trained model saved to {out}; {last}")
    return 0


def cmd_analyze_sparsity(cfg, args) -> int:
    model = _load_model_dir(cfg["paths"]["model"])
    layer = model.layer(args.layer) if args.layer else next(l for l in model.layers if "W" in l.params
                                                            and l.params["W"].ndim == 2)
    mask, report = sparsity_mask(layer.params["W"], float(cfg["model"]["sparsity_ratio"]))
    out = Path(cfg["paths"]["reports"])
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "sparsity.json")
    write_mask(out / "mask.nmk", mask)
    n = mask.shape[0]
    fitted = structured_mask(report.kind, n, report.band_width) if report.kind != "none" else mask
    write_mask(out / "mask_fitted.nmk", fitted)
    print(f"{layer.name}: {report.nnz} weights survive, {100 * report.lower_fraction:.1f}% on/below "
          f"the diagonal; fitted {report.kind} (band width {report.band_width})")
    return 0


def cmd_build_sparse(cfg, args) -> int:
    src_dir = cfg["paths"]["model"]
    source = _load_model_dir(src_dir)
    m = cfg["model"]
    dtype = np.dtype(m["dtype"])
    fcs = [l for l in source.layers if l.kind == "fc"]
    if not fcs:
        raise ShapeError("source model has no dense layer to transfer")
    n = source.n_in
    if m["template"] == "dense":
        m["template"] = "sparse"
    if m["template"] == "sparse":
        mask = read_mask(_require(Path(args.mask)))
        sc = build_sc_from_fc(fcs[0], mask)
        model = build_sparse_template(n, int(m["n_l"]), mask, sc, n_c=int(m["n_c"]),
                                      seed=int(cfg["seed"]), dtype=dtype)
    elif m["template"] == "conv_dense":
        keep = int(m["n_fc_remaining"])
        model = build_conv_dense_template(n, int(m["n_l"]), keep, fcs[len(fcs) - keep:], n_c=int(m["n_c"]),
                                          seed=int(cfg["seed"]), dtype=dtype)
    else:
        raise ConfigError(f"unknown model template {m['template']!r}")
    _save_model_dir(model, args.out_model, src_dir)
    print(f"assembled {m['template']} model with {param_count(model)['trainable']} trainable parameters "
          f"in {args.out_model}")
    return 0


def cmd_grow(cfg, args) -> int:
    data = cfg["paths"]["data"]
    stats = _load_stats(data)
    tr = _normalized(_load_split(data, Split.TRAIN), stats)
    va = _normalized(_load_split(data, Split.VAL), stats)
    model = _load_model_dir(cfg["paths"]["model"])
    tc = train_config(cfg)
    split = cfg["train"]["phase_split"]
    model, steps = grow(model, int(args.target_n_l), tr, va, tc, PhaseSplit(*split) if split else None,
                        n_c=int(cfg["model"]["n_c"]), seed=int(cfg["seed"]))
    out = Path(args.out_model)
    _save_model_dir(model, out, data)
    hist = History()
    for s in steps:
        hist = hist.extend(s.history)
    hist.to_csv(out / "history.csv")
    (out / "growth.json").write_text(json.dumps([s.summary() for s in steps], indent=1))
    for s in steps:
        print(f"n_l={s.n_l}: training loss {s.loss_before:.5g} -> {s.loss_after:.5g} (ratio {s.ratio:.3f})")
    return 0


def cmd_eval(cfg, args) -> int:
    model_dir = cfg["paths"]["model"]
    model = _load_model_dir(model_dir)
    xs, ys = _load_stats(model_dir)
    ds = _load_split(cfg["paths"]["data"], Split[args.split.upper()])
    report = evaluate(model, ds, xs, ys, case=ds.case_id, name=args.name or Path(model_dir).name)
    out = Path(cfg["paths"]["reports"])
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json", out / "per_sample.csv" if args.per_sample else None)
    print(json.dumps(report.to_json()))
    return 0


def cmd_predict(cfg, args) -> int:
    model_dir = cfg["paths"]["model"]
    model = _load_model_dir(model_dir)
    xs, ys = _load_stats(model_dir)
    ds = _load_split(cfg["paths"]["data"], Split[args.split.upper()])
    if not 0 <= args.sample < len(ds):
        raise IndexError(f"sample {args.sample} out of range (split has {len(ds)})")
    y_pred = predict(model, ds.X[args.sample], xs, ys)
    t = dataspace(ds.case_id).grid.times
    if len(t) != len(y_pred):
        raise ShapeError(f"case {ds.case_id} grid has {len(t)} points, prediction has {len(y_pred)}")
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_prediction_csv(out, t, ds.Y[args.sample], y_pred)
    print(f"wrote {out}")
    return 0


def cmd_verify(cfg, args) -> int:
    results = run_checks(int(cfg["dataspace"]["case"]), args.n_loads, int(cfg["seed"]))
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else EXIT_FAILURE


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *groups: str):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named desk-scale configuration")
    p.add_argument("--seed", type=int)
    if "data" in groups:
        p.add_argument("--data", help="dataset directory")
    if "model" in groups:
        p.add_argument("--model", dest="model_dir", help="model directory")
    if "space" in groups:
        p.add_argument("--case", type=int, choices=range(1, 8))
        p.add_argument("--response", choices=("displacement", "acceleration"))
        p.add_argument("--cubic-ratio", type=float, choices=(0.0, 0.25, 0.5, 0.75, 1.0))
    if "train" in groups:
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--reg-weight", type=float)
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    if "template" in groups:
        p.add_argument("--template", choices=("dense", "sparse", "conv_dense"))
        p.add_argument("--n-l", type=int, help="number of CONV blocks")
        p.add_argument("--n-c", type=int, help="filters per CONV block")
        p.add_argument("--n-fc-remaining", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsurrogate", description=__doc__)
    parser.add_argument("--threads", type=int, help="cap on BLAS threads (default: $NDS_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val/test datasets and statistics")
    _common(p, "space")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", dest="data", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a dense or conv-dense model, or continue an existing one")
    _common(p, "data", "train", "template")
    p.add_argument("--n-layers", type=int, help="dense layers in the dense template")
    p.add_argument("--init-model", help="model directory to start from instead of a template")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also write a checkpoint every k epochs")
    p.add_argument("--out", dest="model_dir", help="output model directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze-sparsity", help="magnitude sparsity report and masks of a trained layer")
    _common(p, "model")
    p.add_argument("--layer", help="layer name (default: first dense layer)")
    p.add_argument("--ratio", type=float, help="threshold as a fraction of max |W|")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_analyze_sparsity)

    p = sub.add_parser("build-sparse", help="transfer trained dense weights into a conv-enriched template")
    _common(p, "model", "template")
    p.add_argument("--mask", help="mask file for the sparse layer")
    p.add_argument("--out", dest="out_model", required=True, help="output model directory")
    p.set_defaults(func=cmd_build_sparse)

    p = sub.add_parser("grow", help="insert BN-CONV blocks with two-phase training")
    _common(p, "model", "data", "train")
    p.add_argument("--target-n-l", type=int, required=True)
    p.add_argument("--n-c", type=int)
    p.add_argument("--phase-split", type=int, nargs=2, metavar=("NEW_ONLY", "ALL"))
    p.add_argument("--out", dest="out_model", required=True, help="output model directory")
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("eval", help="test-set report")
    _common(p, "model", "data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--name", help="model label in the report")
    p.add_argument("--per-sample", action="store_true", help="also write per-sample relative errors")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write true and predicted response of one sample")
    _common(p, "model", "data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--output", default="prediction.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="cross-check closed-form and Newmark solvers")
    _common(p)
    p.add_argument("--case", type=int, choices=(1, 5, 6), default=None)
    p.add_argument("--n-loads", type=int)
    p.set_defaults(func=cmd_verify)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("NDS_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"NDS_THREADS must be an integer, got {env!r}") from exc
    return None


def run_cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.preset)
        if getattr(args, "phase_split", None) is not None:
            args.phase_split = list(args.phase_split)
        cfg = _apply_flags(cfg, args, FLAG_KEYS)
        with thread_limit(False, _threads(args)):
            return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetFormatError, ckpt.CheckpointError) as exc:
        print(f"bad file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ShapeError as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (NewtonConvergenceError, FloatingPointError, StatisticsNotFinalizedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run_cli())
