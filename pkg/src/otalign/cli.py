"""``otalign`` command line: generate, pretrain, adapt, evaluate, sweep-alpha, export.

Every command reads one JSON config, writes into ``--out`` and leaves a
``manifest.json`` there with the resolved config, the seed and library
versions. Relative data paths in a run config resolve against the
config file's directory.
"""

import argparse
import csv
import json
import os
import platform
import sys
from importlib import metadata

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .datagen import ShiftConfig, generate_shift_benchmark, load_source, load_target, save_features
from .exceptions import ConfigError, OTAlignError, ParseError
from .metrics import trials_from_posteriors, write_det_csv
from .nn import AdaptationNetwork
from .pipeline import (
    ALPHA_GRID,
    METHODS,
    TrainConfig,
    adapt,
    alpha_sweep,
    evaluate,
    export_artifacts,
    init_network,
    pretrain_source,
)

COMMANDS = ("generate", "pretrain", "adapt", "evaluate", "sweep-alpha", "export")
THREADS_ENV = "OTALIGN_THREADS"


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _grid(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha grid {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("alpha grid needs one or more values >= 0")
    return vals


def build_parser():
    parser = argparse.ArgumentParser(prog="otalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"otalign {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--method", choices=METHODS, help="override the config's method")
        p.add_argument("--seed", type=_u64, help="override the config's seed")
        if name == "sweep-alpha":
            p.add_argument("--grid", type=_grid, help="comma-separated alpha values")
    return parser


# config handling --------------------------------------------------------


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", "config")
    return doc


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class RunConfig:
    """A parsed run config: training settings plus data and network paths."""

    def __init__(self, doc, base_dir, method=None, seed=None):
        doc = dict(doc)
        self.data = doc.pop("data", {}) or {}
        if not isinstance(self.data, dict):
            raise ConfigError("must be an object", "data")
        unknown = set(self.data) - {"source", "target", "eval"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "data")
        self.net_path = doc.pop("net", None)
        self.alpha_grid = doc.pop("alpha_grid", None)
        self.export_batch_size = int(doc.pop("export_batch_size", 64))
        if method is not None:
            doc["method"] = method
            if "lambda_align" not in doc:
                doc["lambda_align"] = None
        if seed is not None:
            doc["seed"] = seed
        try:
            self.train = TrainConfig.from_dict(doc)
        except TypeError as exc:
            raise ConfigError(str(exc), "train") from None
        self.base_dir = base_dir

    def path(self, key):
        rel = self.data.get(key)
        if not rel:
            raise ConfigError("path required for this command", f"data.{key}")
        return rel if os.path.isabs(rel) else os.path.join(self.base_dir, rel)

    def network_path(self):
        if not self.net_path:
            return None
        p = self.net_path
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def to_dict(self):
        d = self.train.to_dict()
        d["data"] = dict(self.data)
        if self.net_path:
            d["net"] = self.net_path
        if self.alpha_grid is not None:
            d["alpha_grid"] = list(self.alpha_grid)
        d["export_batch_size"] = self.export_batch_size
        return d


def _versions():
    return {
        "otalign": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": metadata.version("scikit-learn"),
        "python": platform.python_version(),
    }


def _manifest(out, command, config, seed):
    _write_json(
        {"command": command, "config": config, "seed": seed, "versions": _versions()},
        os.path.join(out, "manifest.json"),
    )


def _load_net(job):
    p = job.network_path()
    if p is None:
        raise ConfigError("a trained network path is required for this command", "net")
    return AdaptationNetwork.load(p)


# commands -----------------------------------------------------------------


def cmd_generate(args, doc, out):
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = ShiftConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc), "shift") from None
    source, target_unlabeled, target_eval = generate_shift_benchmark(cfg)
    save_features(source, os.path.join(out, "source.csv"))
    save_features(target_unlabeled, os.path.join(out, "target_unlabeled.csv"))
    save_features(target_eval, os.path.join(out, "target_eval.csv"))
    _manifest(out, "generate", cfg.to_dict(), cfg.seed)


def _pretrained(job, source):
    """Load the configured network, or pretrain a fresh one on ``source``."""
    if job.network_path():
        return AdaptationNetwork.load(job.network_path()), None
    net = init_network(source.n_features, int(max(source.class_space)) + 1, job.train)
    return pretrain_source(net, source, job.train)


def cmd_pretrain(args, job, out):
    source = load_source(job.path("source"))
    net = init_network(source.n_features, int(max(source.class_space)) + 1, job.train)
    net, hist = pretrain_source(net, source, job.train)
    net.save(os.path.join(out, "net.json"))
    hist.write_csv(os.path.join(out, "history.csv"))
    if job.data.get("eval"):
        evaluate(net, load_target(job.path("eval"))).write_json(os.path.join(out, "metrics.json"))
    _manifest(out, "pretrain", job.to_dict(), job.train.seed)


def cmd_adapt(args, job, out):
    source = load_source(job.path("source"))
    target = load_target(job.path("target"))
    net, pre = _pretrained(job, source)
    if pre is not None:
        pre.write_csv(os.path.join(out, "pretrain_history.csv"))
    net, hist = adapt(net, source, target, job.train)
    net.save(os.path.join(out, "net.json"))
    hist.write_csv(os.path.join(out, "history.csv"))
    hist.write_timing_csv(os.path.join(out, "timing.csv"))
    if job.data.get("eval"):
        evaluate(net, load_target(job.path("eval"))).write_json(os.path.join(out, "metrics.json"))
    _manifest(out, "adapt", job.to_dict(), job.train.seed)


def cmd_evaluate(args, job, out):
    net = _load_net(job)
    labeled = load_target(job.path("eval"))
    evaluate(net, labeled).write_json(os.path.join(out, "metrics.json"))
    Yhat = net.forward(labeled.features).Yhat
    write_det_csv(trials_from_posteriors(Yhat, labeled.labels), os.path.join(out, "det.csv"))
    _manifest(out, "evaluate", job.to_dict(), job.train.seed)


def cmd_sweep(args, job, out):
    grid = args.grid or job.alpha_grid or list(ALPHA_GRID)
    source = load_source(job.path("source"))
    target = load_target(job.path("target"))
    labeled = load_target(job.path("eval"))
    net, _ = _pretrained(job, source)
    rows = alpha_sweep(source, target, labeled, job.train, grid, net=net)
    with open(os.path.join(out, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "eer", "cavg", "accuracy"])
        for r in rows:
            w.writerow([repr(r["alpha"]), repr(r["eer"]), repr(r["cavg"]), repr(r["accuracy"])])
    job.alpha_grid = [float(a) for a in grid]
    _manifest(out, "sweep-alpha", job.to_dict(), job.train.seed)


def cmd_export(args, job, out):
    net = _load_net(job)
    source = load_source(job.path("source"))
    target = load_target(job.path("target"))
    labels = None
    if job.data.get("eval"):
        labeled = load_target(job.path("eval"))
        if labeled.ids == target.ids:
            labels = labeled.labels
    export_artifacts(
        out,
        None,
        net,
        source,
        target,
        job.train.align,
        seed=job.train.seed,
        batch_size=job.export_batch_size,
        target_labels=labels,
    )
    _manifest(out, "export", job.to_dict(), job.train.seed)


RUNNERS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "sweep-alpha": cmd_sweep,
    "export": cmd_export,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"must be a positive integer, got {raw!r}", THREADS_ENV) from None
    if n < 1:
        raise ConfigError(f"must be a positive integer, got {raw!r}", THREADS_ENV)
    return n


def run(argv=None):
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        limit = _thread_limit()
        doc = _read_json(args.config)
        os.makedirs(args.out, exist_ok=True)
        with threadpool_limits(limits=limit):
            if args.command == "generate":
                cmd_generate(args, doc, args.out)
            else:
                base = os.path.dirname(os.path.abspath(args.config))
                job = RunConfig(doc, base, args.method, args.seed)
                RUNNERS[args.command](args, job, args.out)
    except ConfigError as exc:
        print(f"otalign: config error: {exc}", file=sys.stderr)
        return 1
    except (OTAlignError, ValueError, OSError) as exc:
        print(f"otalign: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
