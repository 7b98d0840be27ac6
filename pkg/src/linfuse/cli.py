"""Command-line entry point.

Subcommands: preprocess, train, infer, eval, baseline, export-features.

Exit codes: 0 ok, 1 other library error, 2 bad input (malformed dataset,
bad config, unknown channel or method, empty split), 3 I/O or model-file
error, 4 non-finite training loss, 5 channel mismatch between model and data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import load_model, save_model
from .conv_ops import DEFAULT_CHANNELS, build_channel_set, parse_channels
from .errors import (
    ChannelMismatch,
    DatasetMalformed,
    EmptySplit,
    InvalidSpec,
    LinfuseError,
    ModelFormatError,
    NonFiniteLoss,
    TooFewLabels,
)
from .features import assemble_features, export_histograms
from .graph_store import load_dataset
from .solver import label_propagation_search
from .trainer import (
    Metrics,
    TrainConfig,
    inductive_infer,
    mean_agg,
    predict_channels,
    split_accuracies,
    train,
)

SCHEMA_VERSION = 1

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": [
        "schema_version", "dataset", "seed", "channels", "accuracy",
        "mean_attention", "timings_ms", "config",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "dataset": {"type": "string"},
        "seed": {"type": ["integer", "null"]},
        "channels": {"type": "array", "items": {"type": "string"}},
        "accuracy": {
            "type": "object",
            "required": ["train", "val", "test"],
            "properties": {
                k: {"type": ["number", "null"], "minimum": 0, "maximum": 1}
                for k in ("train", "val", "test")
            },
        },
        "mean_attention": {"type": "object", "additionalProperties": {"type": "number"}},
        "timings_ms": {"type": "object", "additionalProperties": {"type": "number"}},
        "config": {"type": "object"},
    },
}

BASELINES = ("labelprop", "linear", "sgc1", "sgc2", "hgc1", "hgc2", "meanagg")


class UsageError(LinfuseError):
    pass


# -- config ------------------------------------------------------------------


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _channel_list(s: str) -> tuple:
    return tuple(c.name for c in parse_channels(s))


CONFIG_KEYS = {
    "dataset": str,
    "cache_dir": str,
    "channels": _channel_list,
    "n_batches": int,
    "batch_size": int,
    "lr": float,
    "hidden_dims": _int_list,
    "n_layers": int,
    "entropy": float,
    "seed": int,
    "mask_hgc": _bool,
    "rcond": float,
    "out": str,
}
TRAIN_REQUIRED = ("dataset", "out", "n_batches", "lr", "n_layers", "entropy")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        cfg[key] = _convert(key, value, f"{source}:{lineno}")
    return cfg


def _convert(key, value, where):
    if key not in CONFIG_KEYS:
        raise UsageError(f"{where}: unknown config key {key!r}")
    try:
        return CONFIG_KEYS[key](value)
    except (ValueError, InvalidSpec) as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from exc


def resolve_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        cfg.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = _convert(key, val, "--" + key.replace("_", "-")) if isinstance(val, str) else val
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    for key in TRAIN_REQUIRED:
        if key not in cfg:
            raise UsageError(f"missing required config key: {key}")
    n_layers = cfg["n_layers"]
    if n_layers < 1:
        raise UsageError("n_layers must be >= 1")
    hidden = ()
    if n_layers > 1:
        if "hidden_dims" not in cfg:
            raise UsageError("missing required config key: hidden_dims")
        hd = cfg["hidden_dims"]
        if len(hd) == 1:
            hidden = hd * (n_layers - 1)
        elif len(hd) == n_layers - 1:
            hidden = hd
        else:
            raise UsageError(f"hidden_dims has {len(hd)} entries, n_layers needs {n_layers - 1}")
    return TrainConfig(
        n_batches=cfg["n_batches"],
        batch_size=cfg.get("batch_size", 128),
        lr=cfg["lr"],
        hidden=hidden,
        entropy=cfg["entropy"],
        seed=cfg.get("seed", 0),
        mask_hgc=cfg.get("mask_hgc", True),
        rcond=cfg.get("rcond", 1e-10),
        channels=cfg.get("channels", DEFAULT_CHANNELS),
    )


# -- output helpers ----------------------------------------------------------


def metrics_document(m: Metrics, config: dict) -> dict:
    acc = {k: m.accuracy.get(k) for k in ("train", "val", "test")}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "dataset": m.dataset,
        "seed": m.seed,
        "channels": list(m.channels),
        "accuracy": acc,
        "mean_attention": dict(m.mean_attention),
        "timings_ms": dict(m.timings_ms),
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.items()},
    }
    if m.loss_trace:
        doc["loss_trace"] = [float(x) for x in m.loss_trace]
    return doc


def write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _pct(x):
    return "n/a" if x is None else f"{100 * x:.2f}"


# -- commands ----------------------------------------------------------------


def cmd_preprocess(args) -> int:
    graph = load_dataset(args.dataset)
    specs = parse_channels(args.channels)
    caches = build_channel_set(specs, graph, args.cache_dir)
    for c in caches:
        status = "cache hit" if c.from_cache else "computed"
        print(f"{c.name}\t{status}\t{1e3 * c.seconds:.2f} ms")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tcfg = train_config_from(cfg)
    graph = load_dataset(cfg["dataset"])
    model, metrics = train(graph, tcfg, cache_dir=cfg.get("cache_dir"))
    out = Path(cfg["out"])
    save_model(model, out)

    t0 = time.perf_counter()
    ybar, inf = inductive_infer(model, graph, cache_dir=cfg.get("cache_dir"), rcond=tcfg.rcond)
    metrics.accuracy = inf.accuracy
    metrics.mean_attention = inf.mean_attention
    metrics.timings_ms["self_eval"] = 1e3 * (time.perf_counter() - t0)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.json")
    write_json(metrics_document(metrics, cfg), metrics_path)
    tail = np.mean(metrics.loss_trace[-100:])
    print(f"model\t{out}")
    print(f"metrics\t{metrics_path}")
    print(f"final_loss_avg100\t{tail:.6f}")
    for k, v in metrics.accuracy.items():
        print(f"{k}_accuracy\t{_pct(v)}")
    return 0


def _infer(args):
    graph = load_dataset(args.dataset)
    channels = parse_channels(args.channels) if args.channels else None
    model = load_model(args.model, channels)
    if len(graph.split(args.split)) == 0:
        raise EmptySplit(f"split {args.split!r} of {graph.name} is empty")
    ybar, metrics = inductive_infer(model, graph, cache_dir=args.cache_dir, rcond=args.rcond)
    config = {"model": str(args.model), "dataset": str(args.dataset), "split": args.split, "rcond": args.rcond}
    return graph, ybar, metrics, config


def cmd_infer(args) -> int:
    graph, ybar, metrics, config = _infer(args)
    nodes = graph.split(args.split)
    pred = np.argmax(ybar[nodes], axis=1)
    pmax = ybar[nodes, pred]
    with open(args.predictions, "w", encoding="utf-8", newline="\n") as fh:
        for u, k, p in zip(nodes.tolist(), pred.tolist(), pmax.tolist()):
            fh.write(f"{u}\t{k}\t{p:.6f}\n")
    metrics_path = args.metrics or str(args.predictions) + ".metrics.json"
    write_json(metrics_document(metrics, config), metrics_path)
    print(f"predictions\t{args.predictions}\t{len(nodes)} rows")
    print(f"metrics\t{metrics_path}")
    print(f"{args.split}_accuracy\t{_pct(metrics.accuracy[args.split])}")
    return 0


def cmd_eval(args) -> int:
    graph, ybar, metrics, config = _infer(args)
    for k, v in metrics.accuracy.items():
        print(f"{k}_accuracy\t{_pct(v)}")
    for k, v in metrics.mean_attention.items():
        print(f"attention_{k}\t{v:.4f}")
    if args.metrics:
        write_json(metrics_document(metrics, config), args.metrics)
    return 0


def cmd_baseline(args) -> int:
    method = args.method.lower()
    if method not in BASELINES:
        raise UsageError(f"unknown baseline {args.method!r}; choose from {', '.join(BASELINES)}")
    graph = load_dataset(args.dataset)
    t0 = time.perf_counter()
    chosen = {}
    if method == "labelprop":
        alpha, hops, pred, _ = label_propagation_search(graph)
        probs = pred.probs
        chosen = {"alpha": alpha, "hops": hops}
    elif method == "meanagg":
        channels = parse_channels(args.channels or ",".join(DEFAULT_CHANNELS))
        probs = mean_agg(graph, channels, cache_dir=args.cache_dir, rcond=args.rcond)
        chosen = {"channels": ",".join(c.name for c in channels)}
    else:
        caches = build_channel_set([method], graph, args.cache_dir)
        probs = predict_channels(caches, graph, args.rcond)[:, 0]
    acc = split_accuracies(probs, graph)
    print(f"method\t{method}")
    for k, v in chosen.items():
        print(f"{k}\t{v}")
    for k, v in acc.items():
        print(f"{k}_accuracy\t{_pct(v)}")
    if args.metrics:
        m = Metrics(dataset=graph.name, channels=[method], accuracy=acc,
                    timings_ms={"baseline": 1e3 * (time.perf_counter() - t0)})
        write_json(metrics_document(m, {"method": method, **chosen}), args.metrics)
    return 0


def cmd_export_features(args) -> int:
    graph = load_dataset(args.dataset)
    caches = build_channel_set(parse_channels(args.channels), graph, args.cache_dir)
    preds = predict_channels(caches, graph, args.rcond)
    feats = assemble_features(preds, args.entropy)
    out = export_histograms(feats, args.bins, args.out)
    print(f"histograms\t{out}\t{feats.shape[1]} dims x {args.bins} bins")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="linfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, channels_default=",".join(DEFAULT_CHANNELS)):
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--cache-dir", dest="cache_dir")
        sp.add_argument("--channels", default=channels_default)
        sp.add_argument("--rcond", type=float, default=1e-10)

    sp = sub.add_parser("preprocess", help="compute and cache propagated features")
    common(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train the attention module on one graph")
    sp.add_argument("--config")
    sp.add_argument("--dataset")
    sp.add_argument("--cache-dir", dest="cache_dir")
    sp.add_argument("--channels")
    sp.add_argument("--n-batches", dest="n_batches")
    sp.add_argument("--batch-size", dest="batch_size")
    sp.add_argument("--lr")
    sp.add_argument("--hidden-dims", dest="hidden_dims")
    sp.add_argument("--n-layers", dest="n_layers")
    sp.add_argument("--entropy")
    sp.add_argument("--seed")
    sp.add_argument("--mask-hgc", dest="mask_hgc")
    sp.add_argument("--rcond")
    sp.add_argument("--out")
    sp.add_argument("--metrics", help="metrics JSON path (default: <out>.metrics.json)")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("infer", cmd_infer, "predict a graph with a trained model"),
        ("eval", cmd_eval, "report accuracies of a trained model on a graph"),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--model", required=True)
        common(sp, channels_default=None)
        sp.add_argument("--split", default="test", choices=("train", "val", "test"))
        sp.add_argument("--metrics")
        if name == "infer":
            sp.add_argument("--predictions", default="predictions.tsv")
        sp.set_defaults(func=func)

    sp = sub.add_parser("baseline", help="run a non-parametric baseline")
    sp.add_argument("--method", required=True)
    common(sp, channels_default=None)
    sp.add_argument("--metrics")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("export-features", help="histograms of similarity features")
    common(sp)
    sp.add_argument("--entropy", type=float, default=1.0)
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_features)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NonFiniteLoss):
        return 4
    if isinstance(exc, ChannelMismatch):
        return 5
    if isinstance(exc, (ModelFormatError, OSError)):
        return 3
    if isinstance(exc, (DatasetMalformed, InvalidSpec, EmptySplit, UsageError, TooFewLabels)):
        return 2
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (LinfuseError, OSError) as exc:
        print(f"linfuse {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
