"""Command-line entry point.

Subcommands: ``synth``, ``fit``, ``subject-id``, ``task-train``, ``task-eval``
and ``report``. Exit codes: 0 success, 1 input or validation error, 2
numerical failure. The log level comes from ``--log-level`` or the ``CF_LOG``
environment variable.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .fingerprint import METHODS, Protocol, evaluate_subject_id
from .ingest import load_corpus, load_manifest
from .synth import CohortSpec, generate_cohort
from .sysid import FitConfig, fit_recording
from .taskgnn.graph import build_graph
from .taskgnn.network import GnnParams
from .taskgnn.training import TrainConfig, evaluate, history_csv_text, train

log = logging.getLogger("causal_fingerprint")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def atomic_write_text(path, text):
    """Write through a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} {path} is not valid JSON: {exc}") from None


def _load(manifest_path):
    manifest = load_manifest(manifest_path)
    recordings, part, warnings = load_corpus(manifest)
    for w in warnings:
        log.warning(w)
    return manifest, recordings, part


def _manifest_seed(manifest, override):
    return override if override is not None else manifest.extra.get("seed")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    spec = CohortSpec.from_dict(_read_json(args.spec, "cohort spec")) if args.spec else CohortSpec()
    if args.seed is not None:
        spec.seed = args.seed
    log.info("synth config: %s", json.dumps(spec.to_dict(), sort_keys=True))
    manifest = generate_cohort(spec, args.out)
    log.info("wrote %d recordings and manifest to %s", len(manifest.entries), args.out)


def cmd_fit(args):
    manifest, recordings, part = _load(args.manifest)
    cfg = FitConfig(args.ridge)
    log.info("fit config: ridge=%g states=%d inputs=%d", cfg.ridge_lambda, part.m, part.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in recordings:
        sig = fit_recording(rec, part, cfg)
        stem = "_".join(rec.key)
        tmp_csv, tmp_json = out / f".{stem}.csv.tmp", out / f".{stem}.json.tmp"
        sig.save(tmp_csv, tmp_json)
        os.replace(tmp_json, out / f"{stem}.json")
        os.replace(tmp_csv, out / f"{stem}.csv")
    log.info("wrote %d signatures to %s", len(recordings), out)


def cmd_subject_id(args):
    manifest, recordings, part = _load(args.manifest)
    queries = tuple(s for s in args.query_sessions.split(",") if s)
    protocol = Protocol(args.db_session, queries, args.method, args.task)
    cfg = FitConfig(args.ridge)
    seed = _manifest_seed(manifest, args.seed)
    log.info("subject-id config: %s ridge=%g seed=%s", protocol, cfg.ridge_lambda, seed)
    report = evaluate_subject_id(recordings, part, protocol, cfg)
    out = report.to_dict()
    out.update({"kind": "subject-id", "seed": seed, "normalization": manifest.normalization})
    write_json(args.report, out)
    log.info("accuracy %.4f over %d queries", report.accuracy, report.total_queries)


def _task_dataset(recordings, part, cfg, session, classes=None):
    recs = [r for r in recordings if session is None or r.session_tag == session]
    if not recs:
        raise InputError(f"no recordings for session {session!r}")
    if classes is None:
        classes = sorted({r.task_id for r in recs})
    index = {c: k for k, c in enumerate(classes)}
    unknown = sorted({r.task_id for r in recs} - set(index))
    if unknown:
        raise InputError(f"tasks {unknown} were not seen in training")
    recs = sorted(recs, key=lambda r: (r.task_id, r.subject_id, r.session_tag))
    graphs = [build_graph(fit_recording(r, part, cfg), index[r.task_id]) for r in recs]
    return graphs, classes


def _graph_key(g):
    return [g.subject_id, g.task_id, g.session_tag]


def cmd_task_train(args):
    manifest, recordings, part = _load(args.manifest)
    raw = _read_json(args.config, "train config") if args.config else {}
    session = raw.pop("session", None)
    ridge = float(raw.pop("ridge_lambda", FitConfig().ridge_lambda))
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    log.info("task-train config: %s session=%s ridge=%g", cfg.to_dict(), session, ridge)
    graphs, classes = _task_dataset(recordings, part, FitConfig(ridge), session)
    params, history, split = train(graphs, cfg, len(classes))
    test_eval = evaluate(params, [graphs[i] for i in split["test"]], len(classes))
    model = {
        "kind": "task-gnn", "classes": classes, "session": session, "ridge_lambda": ridge,
        "train_config": cfg.to_dict(), "seed": cfg.seed,
        "split": {"train": [_graph_key(graphs[i]) for i in split["train"]],
                  "test": [_graph_key(graphs[i]) for i in split["test"]]},
        "final": history[-1], "test_eval": test_eval, "params": params.to_dict(),
    }
    write_json(args.out, model)
    hist_path = Path(args.history) if args.history else Path(args.out).with_suffix(".history.csv")
    atomic_write_text(hist_path, history_csv_text(history))
    log.info("test accuracy %.4f", test_eval["accuracy"])


def cmd_task_eval(args):
    model = _read_json(args.model, "model")
    if model.get("kind") != "task-gnn":
        raise InputError(f"{args.model} is not a task-gnn model")
    manifest, recordings, part = _load(args.manifest)
    classes = model["classes"]
    params = GnnParams.from_dict(model["params"])
    graphs, _ = _task_dataset(recordings, part, FitConfig(model["ridge_lambda"]),
                              model.get("session"), classes)
    report = {"kind": "task-eval", "method": "cm-gnn", "classes": classes,
              "seed": model.get("seed"), "session": model.get("session"),
              "all": evaluate(params, graphs, len(classes))}
    test_keys = {tuple(k) for k in model.get("split", {}).get("test", [])}
    held_out = [g for g in graphs if tuple(_graph_key(g)) in test_keys]
    if held_out:
        report["test"] = evaluate(params, held_out, len(classes))
    write_json(args.report, report)
    log.info("accuracy %.4f on %d graphs", report["all"]["accuracy"], len(graphs))


def build_grid(reports):
    """Accuracy grid from report dicts.

    Subject-id reports become rows keyed by database session and columns by
    method; task-eval reports become rows keyed by task. Returns
    ``(row_labels, column_labels, cells)`` with ``cells[(row, col)] = accuracy``.
    """
    if not reports:
        raise InputError("report needs at least one input")
    cells, rows, cols = {}, [], []

    def put(row, col, value):
        if row not in rows:
            rows.append(row)
        if col not in cols:
            cols.append(col)
        cells[(row, col)] = value

    for rep in reports:
        kind = rep.get("kind")
        if kind == "subject-id":
            for key in ("method", "db_session", "per_query"):
                if key not in rep:
                    raise InputError(f"subject-id report lacks {key!r}")
            n = len(rep["per_query"])
            correct = sum(q["true_subject"] == q["predicted_subject"] for q in rep["per_query"])
            put(rep["db_session"], rep["method"], correct / n if n else 0.0)
        elif kind == "task-eval":
            block = rep.get("test") or rep.get("all")
            if block is None or "confusion" not in block:
                raise InputError("task-eval report lacks a confusion matrix")
            cm = np.asarray(block["confusion"])
            for c, name in enumerate(rep["classes"]):
                support = cm[c].sum()
                put(name, rep.get("method", "cm-gnn"), float(cm[c, c] / support) if support else 0.0)
            put("Average", rep.get("method", "cm-gnn"), float(np.trace(cm) / cm.sum()))
        else:
            raise InputError(f"unknown report kind {kind!r}")
    return rows, cols, cells


def format_grid(rows, cols, cells):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row"] + cols)
    for r in rows:
        writer.writerow([r] + [("" if (r, c) not in cells else f"{cells[(r, c)]:.6f}")
                               for c in cols])
    return buf.getvalue()


def format_table(rows, cols, cells):
    width = max([len("row")] + [len(r) for r in rows]) + 2
    cw = max([10] + [len(c) + 2 for c in cols])
    lines = ["".ljust(width) + "".join(c.rjust(cw) for c in cols)]
    for r in rows:
        vals = [("-" if (r, c) not in cells else f"{100 * cells[(r, c)]:.3f}%") for c in cols]
        lines.append(r.ljust(width) + "".join(v.rjust(cw) for v in vals))
    return "\n".join(lines) + "\n"


def cmd_report(args):
    reports = [_read_json(p, "report") for p in args.inputs]
    rows, cols, cells = build_grid(reports)
    atomic_write_text(args.out, format_grid(rows, cols, cells))
    sys.stdout.write(format_table(rows, cols, cells))


# -- wiring ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="causal-fingerprint", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default=None, help="overrides CF_LOG (default INFO)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic cohort and manifest")
    s.add_argument("--spec", help="cohort spec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="fit one signature per recording")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ridge", type=float, default=FitConfig().ridge_lambda)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("subject-id", help="one-shot subject identification")
    s.add_argument("--manifest", required=True)
    s.add_argument("--db-session", required=True)
    s.add_argument("--query-sessions", required=True, help="comma separated")
    s.add_argument("--method", choices=METHODS, default="cm-mdp")
    s.add_argument("--task", default=None, help="restrict to one task")
    s.add_argument("--ridge", type=float, default=FitConfig().ridge_lambda)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_subject_id)

    s = sub.add_parser("task-train", help="train the task classifier")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="train config JSON; may also hold 'session' and 'ridge_lambda'")
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="history CSV path (default: next to the model)")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_task_train)

    s = sub.add_parser("task-eval", help="evaluate a trained task classifier")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_task_eval)

    s = sub.add_parser("report", help="method x session / task accuracy grid")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True, help="CSV grid path")
    s.set_defaults(func=cmd_report)
    return p


def _validate_paths(args):
    for name in ("manifest", "model", "spec", "config"):
        value = getattr(args, name, None)
        if value is not None and not Path(value).is_file():
            raise InputError(f"{name} file not found: {value}")
    for value in getattr(args, "inputs", None) or []:
        if not Path(value).is_file():
            raise InputError(f"report not found: {value}")


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    level = (args.log_level or os.environ.get("CF_LOG") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    log.info("command %s: %s", args.command,
             json.dumps({k: v for k, v in vars(args).items() if k != "func"}, sort_keys=True,
                        default=str))
    try:
        _validate_paths(args)
        args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
