"""Command-line entry point: extract, select, meta-train, adapt, eval, summary, pipeline.

Configuration resolves in three layers: built-in defaults, then a config
file (``key=value`` lines, or a JSON run manifest from an earlier run),
then command-line flags. Every run writes one JSON run manifest.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, evaluate, metasgd, net
from .episodes import (
    dataset_from_matrix,
    draw_test_classes,
    make_adaptation_task,
    split_classes,
)
from .errors import FlowmetaError, FormatError, PreconditionError, UsageError
from .flows import assemble_flows, export_features, extract_features
from .pcap import parse_capture
from .select import ForestConfig, SelectionReport, select_features
from .synthetic import SYNTHETIC_TAG, make_synthetic
from .table import FeatureMatrix, read_feature_csv, write_feature_csv

log = logging.getLogger("flowmeta")

SUBCOMMANDS = ("extract", "select", "meta-train", "adapt", "eval", "summary", "pipeline", "make-synthetic")
THREADS_ENV = "META_UAD_THREADS"


def _int(v):
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        return int(v.strip())
    raise ValueError("expected an integer")


def _float(v):
    if isinstance(v, bool):
        raise ValueError("expected a number")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        return float(v.strip())
    raise ValueError("expected a number")


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v.strip()


def _opt_int(v):
    if v is None or (isinstance(v, str) and v.strip() in ("", "none")):
        return None
    return _int(v)


def _int_list(v):
    if isinstance(v, str):
        parts = [p for p in v.replace(" ", "").split(",") if p]
        return [int(p) for p in parts]
    if isinstance(v, list):
        return [_int(x) for x in v]
    raise ValueError("expected a comma-separated list of integers")


def _str_list(v):
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    if isinstance(v, list):
        return [_str(x) for x in v]
    raise ValueError("expected a comma-separated list")


@dataclass(frozen=True)
class Option:
    parse: object
    default: object
    help: str


# One flat schema shared by every subcommand; flag names are keys with
# underscores turned into dashes.
SCHEMA = {
    "seed": Option(_int, 0, "master seed"),
    "k": Option(_int, 5, "anomaly classes per episode"),
    "m": Option(_int, 10, "support shots per class"),
    "n": Option(_opt_int, None, "validation shots per class (defaults to m)"),
    "beta": Option(_float, 0.001, "outer learning rate"),
    "alpha_init": Option(_float, 0.01, "initial per-parameter inner step size"),
    "episodes": Option(_int, 10_000, "meta-training episodes"),
    "mode": Option(_str, metasgd.EXACT, "outer gradient: exact or first_order"),
    "inner_steps": Option(_int, 1, "inner steps during meta-training"),
    "loss_reduction": Option(_str, net.MEAN, "task loss over a set: mean or sum"),
    "hidden": Option(_int_list, list(net.DEFAULT_HIDDEN), "hidden layer widths"),
    "patience": Option(_int, 500, "early-stopping patience in episodes (0 disables)"),
    "holdout_every": Option(_int, 100, "episodes between held-out checks"),
    "holdout_episodes": Option(_int, 10, "episodes in the held-out stream"),
    "adapt_steps": Option(_int, 10, "adaptation steps on a new class"),
    "trials": Option(_int, evaluate.DEFAULT_TRIALS, "evaluation trials"),
    "cross_m": Option(_int, 20, "support shots in the cross-dataset protocol"),
    "missing": Option(_float, 0.5, "drop features missing in more than this fraction"),
    "bottom": Option(_float, 0.3, "drop this fraction of least important survivors"),
    "trees": Option(_int, 100, "random forest size"),
    "max_depth": Option(_int, 12, "tree depth limit"),
    "min_split": Option(_int, 5, "smallest node that may be split"),
    "idle_timeout_s": Option(_float, 120.0, "flow idle timeout in seconds"),
    "normal_label": Option(_str, "BENIGN", "label of normal traffic"),
    "n_test": Option(_int, 12, "held-out anomaly classes when test_classes is empty"),
    "test_classes": Option(_str_list, [], "explicit held-out anomaly classes"),
    "data": Option(_str, SYNTHETIC_TAG, "feature CSV, or 'synthetic'"),
    "data_b": Option(_str, "", "second dataset for the cross-dataset protocol"),
    "pcap": Option(_str, "", "packet capture to extract instead of reading data"),
    "labels": Option(_str, "", "flow label file for extraction"),
    "out_dir": Option(_str, "run", "pipeline output directory"),
    "synthetic_classes": Option(_int, 42, "anomaly classes in the synthetic set"),
    "synthetic_normal": Option(_int, 3000, "normal rows in the synthetic set"),
    "synthetic_dim": Option(_int, 20, "features in the synthetic set"),
}

# Flags each subcommand accepts, besides the global ones.
COMMAND_KEYS = {
    "extract": ("idle_timeout_s", "labels", "normal_label", "pcap"),
    "select": ("missing", "bottom", "trees", "max_depth", "min_split", "normal_label"),
    "meta-train": (
        "k", "m", "n", "beta", "alpha_init", "episodes", "mode", "inner_steps", "loss_reduction",
        "hidden", "patience", "holdout_every", "holdout_episodes", "adapt_steps", "normal_label",
        "n_test", "test_classes", "data",
    ),
    "adapt": ("m", "adapt_steps", "data"),
    "eval": ("m", "trials", "adapt_steps", "data", "normal_label", "alpha_init"),
    "summary": ("data", "normal_label", "synthetic_classes", "synthetic_normal", "synthetic_dim"),
    "pipeline": tuple(k for k in SCHEMA if k != "seed"),
    "make-synthetic": ("synthetic_classes", "synthetic_normal", "synthetic_dim", "normal_label"),
}

_FLAG_ALIASES = {"adapt_steps": ("--steps",)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value file or JSON run manifest")
    common.add_argument("--manifest-out", default=argparse.SUPPRESS, help="where to write the run manifest")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="warnings only")

    parser = _Parser(prog="flowmeta", description="Few-shot flow anomaly detection toolkit.", parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    cmds = {name: sub.add_parser(name, parents=[common]) for name in SUBCOMMANDS}
    for name, keys in COMMAND_KEYS.items():
        for key in keys:
            flags = (_flag(key),) + _FLAG_ALIASES.get(key, ())
            cmds[name].add_argument(*flags, dest=key, default=argparse.SUPPRESS, help=SCHEMA[key].help)

    c = cmds["extract"]
    c.add_argument("--in", dest="input", required=True, help="classic pcap file")
    c.add_argument("--out", required=True, help="feature CSV to write")
    c = cmds["select"]
    c.add_argument("--in", dest="input", required=True, help="labeled feature CSV")
    c.add_argument("--out-manifest", required=True, help="selection manifest (JSON)")
    c = cmds["meta-train"]
    c.add_argument("--manifest", required=True, help="selection manifest (JSON)")
    c.add_argument("--out", required=True, help="checkpoint to write")
    c.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    c = cmds["adapt"]
    c.add_argument("--ckpt", required=True)
    c.add_argument("--class", dest="class_name", required=True, help="anomaly class to adapt to")
    c.add_argument("--manifest", help="selection manifest (default: the one in the checkpoint)")
    c.add_argument("--out", required=True)
    c = cmds["eval"]
    c.add_argument("--ckpt", required=True)
    c.add_argument("--manifest", help="selection manifest (default: the one in the checkpoint)")
    c.add_argument("--protocol", choices=("auto", "mshot", "cross"), default="auto",
                   help="mshot uses the checkpoint's test classes, cross every anomaly class")
    c.add_argument("--baseline", action="store_true", help="also adapt a random network")
    c.add_argument("--out", required=True, help="report JSON")
    c.add_argument("--trials-csv", help="one row per trial")
    c = cmds["summary"]
    c.add_argument("--out", help="also write the table as JSON")
    c = cmds["make-synthetic"]
    c.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------- config


def parse_config_text(text: str, origin="config") -> dict:
    """Raw values from a key=value file or a JSON run manifest."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{origin}: invalid JSON: {exc}") from None
        values = doc.get("config", doc) if isinstance(doc, dict) else None
        if not isinstance(values, dict):
            raise FormatError(f"{origin}: expected a JSON object")
        return dict(values)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config is not UTF-8") from None
    return parse_config_text(text, str(path))


def _coerce(key, value, origin):
    if key not in SCHEMA:
        raise UsageError(f"unknown configuration key {key!r} ({origin})")
    try:
        return SCHEMA[key].parse(value)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad value {value!r} for {key!r} ({origin}): {exc}") from None


def resolve_config(file_values: dict | None = None, flag_values: dict | None = None) -> tuple:
    """Return (config, sources): defaults < file < flags, with n defaulting to m."""
    config = {k: opt.default for k, opt in SCHEMA.items()}
    sources = {k: "default" for k in SCHEMA}
    for origin, values in (("file", file_values or {}), ("flag", flag_values or {})):
        for key, value in values.items():
            config[key] = _coerce(key, value, origin)
            sources[key] = origin
    if config["n"] is None:
        config["n"] = config["m"]
        sources["n"] = "m"
    validate_config(config)
    return config, sources


def validate_config(c: dict) -> None:
    def need(cond, what):
        if not cond:
            raise PreconditionError(what)

    for key in ("k", "m", "n", "inner_steps", "adapt_steps", "trials", "cross_m", "trees",
                "max_depth", "min_split", "holdout_every", "holdout_episodes", "synthetic_dim"):
        need(c[key] >= 1, f"{key} must be >= 1 (got {c[key]})")
    for key in ("episodes", "patience", "n_test", "synthetic_classes", "synthetic_normal"):
        need(c[key] >= 0, f"{key} must be >= 0 (got {c[key]})")
    need(c["beta"] > 0, f"beta must be > 0 (got {c['beta']})")
    need(np.isfinite(c["alpha_init"]), "alpha_init must be finite")
    need(0.0 <= c["missing"] <= 1.0, f"missing must lie in [0, 1] (got {c['missing']})")
    need(0.0 <= c["bottom"] < 1.0, f"bottom must lie in [0, 1) (got {c['bottom']})")
    need(c["idle_timeout_s"] > 0, f"idle_timeout_s must be > 0 (got {c['idle_timeout_s']})")
    need(c["mode"] in metasgd.OUTER_MODES, f"mode must be one of {metasgd.OUTER_MODES} (got {c['mode']!r})")
    need(c["loss_reduction"] in net.REDUCTIONS,
         f"loss_reduction must be one of {net.REDUCTIONS} (got {c['loss_reduction']!r})")
    need(c["mode"] != metasgd.EXACT or c["inner_steps"] == 1, "exact mode requires inner_steps = 1")
    need(len(c["hidden"]) >= 1 and min(c["hidden"]) >= 1, "hidden widths must be positive")


def train_config(c: dict) -> metasgd.TrainConfig:
    return metasgd.TrainConfig(
        seed=c["seed"], episodes=c["episodes"], K=c["k"], M=c["m"], N=c["n"],
        inner_steps_train=c["inner_steps"], adapt_steps=c["adapt_steps"], outer_mode=c["mode"],
        alpha_init=c["alpha_init"], beta=c["beta"], loss_reduction=c["loss_reduction"],
        hidden=tuple(c["hidden"]), patience=c["patience"], holdout_every=c["holdout_every"],
        holdout_episodes=c["holdout_episodes"],
    )


def forest_config(c: dict) -> ForestConfig:
    return ForestConfig(seed=c["seed"], n_trees=c["trees"], max_depth=c["max_depth"], min_split=c["min_split"])


# ---------------------------------------------------------------- manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    config_sources: dict
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    outputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    preprocessing: dict = field(default_factory=dict)
    outer_mode: str = ""
    hvp_method: str = net.HVP_METHOD
    loss_reduction: str = ""
    results: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def add_input(self, name, path):
        self.inputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, name, path):
        self.outputs[name] = {"path": str(path), "sha256": sha256_file(path)}

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n"


def _seeds(c: dict) -> dict:
    s = c["seed"]
    return {
        "seed": s,
        "network_init": s,
        "forest_tree": "seed ^ tree_index",
        "train_episode": f"[{s}, 0, episode]",
        "holdout_episode": f"[{s}, 1, index]",
        "test_class_draw": s,
        "eval_trial": "seed ^ trial_index",
    }


def _preprocessing(report: SelectionReport) -> dict:
    return {
        "retained_ids": list(report.retained_ids),
        "removed": [{"feature_id": f, "rule": r, "statistic": v} for f, r, v in report.removed],
        "medians": report.medians,
        "means": report.means,
        "stds": report.stds,
    }


# ---------------------------------------------------------------- helpers


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"{THREADS_ENV} must be >= 0")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"{what} {str(path)!r} not found")
    return p


def _load_matrix(c: dict, key="data", seed_offset=0) -> FeatureMatrix:
    source = c[key]
    if source == SYNTHETIC_TAG:
        return make_synthetic(
            seed=c["seed"] + seed_offset, n_anomaly_classes=c["synthetic_classes"],
            n_normal=c["synthetic_normal"], dim=c["synthetic_dim"], normal_label=c["normal_label"],
        )
    return read_feature_csv(_require_file(source, "data file"))


def _read_flow_labels(path) -> dict:
    """Flow label file: CSV with src_addr,src_port,dst_addr,dst_port,protocol,label."""
    need = ["src_addr", "src_port", "dst_addr", "dst_port", "protocol", "label"]
    table = {}
    with open(_require_file(path, "label file"), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(col not in reader.fieldnames for col in need):
            raise FormatError(f"{path}: label file needs columns {', '.join(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                a = (row["src_addr"].strip(), int(row["src_port"]))
                b = (row["dst_addr"].strip(), int(row["dst_port"]))
                proto = int(row["protocol"])
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: bad port or protocol") from None
            table[(min(a, b), max(a, b), proto)] = row["label"].strip()
    return table


def _checkpoint_report(header, manifest_path) -> SelectionReport:
    if manifest_path:
        return SelectionReport.load(_require_file(manifest_path, "selection manifest"))
    if "selection" not in header:
        raise FormatError("checkpoint carries no selection manifest; pass --manifest")
    return SelectionReport.from_json(json.dumps(header["selection"]))


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _progress(every=100):
    def hook(rec):
        if rec["episode"] % every == 0:
            extra = f", holdout {rec['holdout_loss']:.4f}" if "holdout_loss" in rec else ""
            log.info("episode %d: val loss %.4f%s", rec["episode"], rec["mean_val_loss"], extra)

    return hook


def _write_log(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_extract(args, c, man: RunManifest):
    pcap_path = _require_file(args.input, "capture")
    man.add_input("pcap", pcap_path)
    capture = parse_capture(pcap_path)
    flows = assemble_flows(capture.packets, idle_timeout=int(round(c["idle_timeout_s"] * 1_000_000)))
    vectors = extract_features(flows)
    labels = None
    if c["labels"]:
        table = _read_flow_labels(c["labels"])
        man.add_input("labels", c["labels"])
        labels = [table.get(f.key.canonical_id(), c["normal_label"]) for f in flows]
    ids_path = export_features(vectors, args.out, labels)
    man.add_output("features", args.out)
    man.add_output("feature_ids", ids_path)
    man.results = {"packets": len(capture), "skipped_frames": capture.skipped, "flows": len(flows)}
    print(f"{len(flows)} flows from {len(capture)} packets ({capture.skipped} frames skipped) -> {args.out}")


def _select(matrix, c):
    return select_features(matrix, forest_config(c), missing_threshold=c["missing"], bottom_fraction=c["bottom"])


def cmd_select(args, c, man: RunManifest):
    path = _require_file(args.input, "feature CSV")
    man.add_input("features", path)
    matrix = read_feature_csv(path)
    if not matrix.labeled:
        raise FormatError(f"{path}: data is unlabeled: no 'label' column")
    report = _select(matrix, c)
    report.save(args.out_manifest)
    man.add_output("selection", args.out_manifest)
    man.preprocessing = _preprocessing(report)
    print(f"retained {len(report.retained_ids)} of {matrix.values.shape[1]} features -> {args.out_manifest}")


def _test_names(c, matrix: FeatureMatrix) -> list:
    if c["test_classes"]:
        return list(c["test_classes"])
    anomalies = sorted(set(matrix.labels) - {c["normal_label"]})
    return draw_test_classes(anomalies, c["n_test"], c["seed"])


def _train(ds, split, c, report, data_hash, out, log_path):
    cfg = train_config(c)
    result = metasgd.meta_train(ds, split, cfg, on_episode=_progress())
    header = {
        "kind": "meta",
        "seed": c["seed"],
        "train_config": cfg.to_dict(),
        "normal_label": c["normal_label"],
        "split": split.names(ds),
        "selection": json.loads(report.to_json()),
        "data_sha256": data_hash,
        "episodes_run": len(result.log),
        "best_episode": result.best_episode,
        "stopped_early": result.stopped_early,
    }
    metasgd.save_meta(out, result.meta, header)
    _write_log(log_path, result.log)
    return result


def cmd_meta_train(args, c, man: RunManifest):
    path = _require_file(c["data"], "data file")
    man.add_input("data", path)
    man.add_input("selection", _require_file(args.manifest, "selection manifest"))
    report = SelectionReport.load(args.manifest)
    matrix = read_feature_csv(path)
    ds = dataset_from_matrix(matrix, report, c["normal_label"])
    split = split_classes(ds, test_class_names=_test_names(c, matrix))
    log_path = args.log or f"{args.out}.log.jsonl"
    result = _train(ds, split, c, report, man.inputs["data"]["sha256"], args.out, log_path)
    man.add_output("checkpoint", args.out)
    man.preprocessing = _preprocessing(report)
    man.results = {"episodes_run": len(result.log), "best_episode": result.best_episode,
                   "split": split.names(ds)}
    print(f"trained {len(result.log)} episodes (best {result.best_episode}) -> {args.out}")


def _adapt_one(meta, ds, class_name, c, seed):
    cls = ds.class_id(class_name)
    if cls == ds.normal_class:
        raise PreconditionError(f"cannot adapt to the normal class {class_name!r}")
    task = make_adaptation_task(ds, cls, c["m"], seed, K=meta.K)
    adapted = metasgd.adapt(meta, task.support_X, task.support_y, c["adapt_steps"])
    pred, _ = metasgd.predict(adapted, task.val_X)
    cm = evaluate.confusion(pred, task.val_y, meta.K + 2)
    return adapted, evaluate.f1(cm, meta.K + 1)


def cmd_adapt(args, c, man: RunManifest):
    man.add_input("checkpoint", _require_file(args.ckpt, "checkpoint"))
    meta, header = metasgd.load_meta(args.ckpt)
    report = _checkpoint_report(header, args.manifest)
    path = _require_file(c["data"], "data file")
    man.add_input("data", path)
    ds = dataset_from_matrix(read_feature_csv(path), report, header.get("normal_label", c["normal_label"]))
    adapted, score = _adapt_one(meta, ds, args.class_name, c, c["seed"])
    out_header = {k: v for k, v in header.items() if k not in ("shape", "beta", "loss_reduction")}
    out_header.update(kind="adapted", adapted_class=args.class_name, adapt_m=c["m"],
                      adapt_steps=c["adapt_steps"], adapt_seed=c["seed"], validation_f1=score)
    metasgd.save_meta(args.out, metasgd.MetaParameters(adapted, meta.alpha, meta.beta, meta.reduction), out_header)
    man.add_output("checkpoint", args.out)
    man.outer_mode = header.get("train_config", {}).get("outer_mode", "")
    man.results = {"class": args.class_name, "validation_f1": score}
    print(f"adapted to {args.class_name!r}: validation F1 {score:.4f} -> {args.out}")


def _baseline(meta, c):
    return metasgd.init_meta(meta.shape, c["seed"], c["alpha_init"], meta.beta, meta.reduction)


def _print_reports(reports, label):
    for name, rep in reports.items():
        print(f"{label} {name}: novel-class F1 {rep.mean:.4f} +/- {rep.std:.4f} over {len(rep.trials)} trials")


def cmd_eval(args, c, man: RunManifest):
    man.add_input("checkpoint", _require_file(args.ckpt, "checkpoint"))
    meta, header = metasgd.load_meta(args.ckpt)
    report = _checkpoint_report(header, args.manifest)
    path = _require_file(c["data"], "data file")
    man.add_input("data", path)
    ds = dataset_from_matrix(read_feature_csv(path), report, header.get("normal_label", c["normal_label"]))
    test_names = [n for n in header.get("split", {}).get("test", []) if n in ds.registry]
    protocol = args.protocol
    if protocol == "auto":
        protocol = "mshot" if test_names else "cross"
    if protocol == "mshot":
        if not test_names:
            raise PreconditionError("checkpoint test classes are absent from this data; use --protocol cross")
        classes = [ds.class_id(n) for n in test_names]
    else:
        classes = ds.anomaly_classes
    baseline = _baseline(meta, c) if args.baseline else None
    reports = evaluate.run_trials(meta, ds, classes, c["m"], c["trials"], c["seed"], c["adapt_steps"],
                                  baseline=baseline)
    Path(args.out).write_text(
        evaluate.reports_to_json(reports, {"protocol": protocol, "M": c["m"]}), encoding="utf-8"
    )
    man.add_output("report", args.out)
    if args.trials_csv:
        evaluate.write_trials_csv(reports, args.trials_csv)
        man.add_output("trials_csv", args.trials_csv)
    man.outer_mode = header.get("train_config", {}).get("outer_mode", "")
    man.results = {name: rep.mean for name, rep in reports.items()}
    _print_reports(reports, f"M={c['m']}")


def cmd_summary(args, c, man: RunManifest):
    if c["data"] != SYNTHETIC_TAG:
        man.add_input("data", _require_file(c["data"], "data file"))
    matrix = _load_matrix(c)
    if not matrix.labeled:
        raise FormatError("data is unlabeled: no 'label' column")
    rows = evaluate.label_summary(matrix.labels, c["normal_label"])
    rows.sort(key=lambda r: (-r[2], r[0]))
    n_normal = sum(1 for lab in matrix.labels if lab == c["normal_label"])
    print(f"normal ({c['normal_label']}): {n_normal} flows")
    print(f"{'class':<32} {'flows':>8} {'normal:class':>13}")
    for name, count, ratio in rows:
        print(f"{name:<32} {count:>8} {ratio:>11}:1")
    table = [{"class": n, "flows": k, "imbalance_ratio": r} for n, k, r in rows]
    if args.out:
        _write_json(args.out, {"normal_label": c["normal_label"], "normal_flows": n_normal, "classes": table})
        man.add_output("summary", args.out)
    man.results = {"normal_flows": n_normal, "classes": len(table)}


def cmd_make_synthetic(args, c, man: RunManifest):
    write_feature_csv(_load_matrix(dict(c, data=SYNTHETIC_TAG)), args.out)
    man.add_output("data", args.out)
    print(f"synthetic data -> {args.out}")


def cmd_pipeline(args, c, man: RunManifest):
    out = Path(c["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    # 1. labeled feature table
    if c["pcap"]:
        data_path = out / "flows.csv"
        pcap_path = _require_file(c["pcap"], "capture")
        man.add_input("pcap", pcap_path)
        capture = parse_capture(pcap_path)
        flows = assemble_flows(capture.packets, idle_timeout=int(round(c["idle_timeout_s"] * 1_000_000)))
        labels = None
        if c["labels"]:
            table = _read_flow_labels(c["labels"])
            man.add_input("labels", c["labels"])
            labels = [table.get(f.key.canonical_id(), c["normal_label"]) for f in flows]
        export_features(extract_features(flows), data_path, labels)
    elif c["data"] == SYNTHETIC_TAG:
        data_path = out / "data.csv"
        write_feature_csv(_load_matrix(c), data_path)
    else:
        data_path = _require_file(c["data"], "data file")
    man.add_input("data", data_path)
    matrix = read_feature_csv(data_path)
    if not matrix.labeled:
        raise FormatError(f"{data_path}: data is unlabeled: no 'label' column")

    # 2. class split, then feature selection on training classes and normal rows only
    test_names = _test_names(c, matrix)
    held_out = set(test_names)
    train_rows = [i for i, lab in enumerate(matrix.labels) if lab not in held_out]
    report = _select(matrix.subset(rows=train_rows), c)
    report.save(out / "selection.json")
    man.add_output("selection", out / "selection.json")
    man.preprocessing = _preprocessing(report)
    ds = dataset_from_matrix(matrix, report, c["normal_label"])
    split = split_classes(ds, test_class_names=test_names)

    # 3. meta-training
    ckpt = out / "meta.ckpt"
    result = _train(ds, split, c, report, man.inputs["data"]["sha256"], ckpt, out / "train_log.jsonl")
    man.add_output("checkpoint", ckpt)
    meta = result.meta

    # 4. one adapted model, on the first held-out class
    adapted, score = _adapt_one(meta, ds, test_names[0], c, c["seed"])
    metasgd.save_meta(out / "adapted.ckpt", metasgd.MetaParameters(adapted, meta.alpha, meta.beta, meta.reduction),
                      {"kind": "adapted", "adapted_class": test_names[0], "adapt_m": c["m"],
                       "adapt_steps": c["adapt_steps"], "validation_f1": score, "seed": c["seed"]})
    man.add_output("adapted_checkpoint", out / "adapted.ckpt")

    # 5. M-shot protocol
    baseline = _baseline(meta, c)
    reports = evaluate.run_mshot_protocol(meta, ds, split, c["m"], c["trials"], c["seed"], c["adapt_steps"],
                                          baseline=baseline)
    report_path = out / f"report_m{c['m']}.json"
    report_path.write_text(evaluate.reports_to_json(reports, {"protocol": "mshot", "M": c["m"]}), encoding="utf-8")
    evaluate.write_trials_csv(reports, out / f"trials_m{c['m']}.csv")
    man.add_output("report", report_path)
    man.add_output("trials_csv", out / f"trials_m{c['m']}.csv")
    _print_reports(reports, f"M={c['m']}")
    summary = {
        "mshot": {name: {"mean": r.mean, "std": r.std} for name, r in reports.items()},
        "classes": [{"class": n, "flows": k, "imbalance_ratio": r} for n, k, r in evaluate.dataset_summary(ds)],
        "split": split.names(ds),
        "adapted": {"class": test_names[0], "validation_f1": score},
    }

    # 6. optional cross-dataset protocol
    if c["data_b"]:
        matrix_b = _load_matrix(c, "data_b", seed_offset=1)
        if c["data_b"] != SYNTHETIC_TAG:
            man.add_input("data_b", c["data_b"])
        ds_b = dataset_from_matrix(matrix_b, report, c["normal_label"])
        cross = evaluate.run_cross_dataset(meta, ds_b, c["cross_m"], c["trials"], c["seed"], c["adapt_steps"],
                                           baseline=baseline)
        cross_path = out / "report_cross.json"
        cross_path.write_text(evaluate.reports_to_json(cross, {"protocol": "cross", "M": c["cross_m"]}),
                              encoding="utf-8")
        man.add_output("cross_report", cross_path)
        summary["cross"] = {name: {"mean": r.mean, "std": r.std} for name, r in cross.items()}
        _print_reports(cross, f"cross M={c['cross_m']}")

    _write_json(out / "summary.json", summary)
    man.add_output("summary", out / "summary.json")
    man.results = {"episodes_run": len(result.log), "best_episode": result.best_episode,
                   "novel_f1": {name: r.mean for name, r in reports.items()}}


COMMANDS = {
    "extract": cmd_extract,
    "select": cmd_select,
    "meta-train": cmd_meta_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "summary": cmd_summary,
    "pipeline": cmd_pipeline,
    "make-synthetic": cmd_make_synthetic,
}


def _default_manifest_path(command, args, c) -> Path:
    if command == "pipeline":
        return Path(c["out_dir"]) / "run_manifest.json"
    target = getattr(args, "out", None) or getattr(args, "out_manifest", None)
    if target:
        return Path(f"{target}.run.json")
    return Path(f"{command}.run.json")


def dispatch(argv) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return UsageError.exit_code
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("no subcommand given; choose one of " + ", ".join(SUBCOMMANDS))
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)

    file_values = load_config(args.config) if hasattr(args, "config") else {}
    flag_values = {k: getattr(args, k) for k in SCHEMA if hasattr(args, k)}
    c, sources = resolve_config(file_values, flag_values)
    man = RunManifest(subcommand=args.command, config=c, config_sources=sources,
                      outer_mode=c["mode"], loss_reduction=c["loss_reduction"], seeds=_seeds(c))
    man.timestamps["started"] = _now()
    with _thread_limit():
        COMMANDS[args.command](args, c, man)
    man.timestamps["finished"] = _now()
    path = Path(getattr(args, "manifest_out", None) or _default_manifest_path(args.command, args, c))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(man.to_json(), encoding="utf-8")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        return dispatch(argv)
    except FlowmetaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
