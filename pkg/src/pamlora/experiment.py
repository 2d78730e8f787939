"""Experiment driver: every (order, seed) pair of a config, summaries and audits.

Layout written under ``cfg.output_dir``::

    manifest.json
    summary.csv
    runs/<order>_seed<seed>/   one results bundle per run
"""
from __future__ import annotations

import csv
import io
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_from_dict
from .errors import ContractError
from .harness import (METRICS, atomic_write, read_matrix_csv, read_metrics, recompute_metrics,
                      run_sequence, write_bundle)

SUMMARY_COLUMNS = ("metric", "mean", "std_across_orders", "std_across_seeds", "n_runs")
PLOT_KINDS = ("forgetting_over_time", "acc_by_order", "ablation_sweep")


def run_dir_name(order: str, seed: int) -> str:
    return f"{order}_seed{seed}"


def _one_run(cfg_dict: dict, order: str, seed: int, directory: str) -> dict:
    entry = {"order": order, "seed": seed, "path": str(Path("runs") / run_dir_name(order, seed))}
    try:
        result = run_sequence(config_from_dict(cfg_dict), seed=seed, order=order)
        write_bundle(result, Path(directory) / entry["path"])
        entry["status"] = "ok"
    except Exception as exc:  # a failed run is recorded, the rest continue
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"
        entry["traceback"] = traceback.format_exc(limit=3)
    return entry


def summarize(per_run: dict) -> list[dict]:
    """Aggregate ``{(order, seed): metrics}`` into one row per metric.

    ``std_across_orders`` is the population std over orders of the seed-mean;
    ``std_across_seeds`` is the same with the roles swapped.
    """
    if not per_run:
        return []
    orders = sorted({o for o, _ in per_run})
    seeds = sorted({s for _, s in per_run})
    rows = []
    for name in METRICS:
        vals = {k: float(v[name]) for k, v in per_run.items()}
        by_order = [np.mean([vals[(o, s)] for s in seeds if (o, s) in vals]) for o in orders]
        by_seed = [np.mean([vals[(o, s)] for o in orders if (o, s) in vals]) for s in seeds]
        rows.append({
            "metric": name,
            "mean": float(np.mean(list(vals.values()))),
            "std_across_orders": float(np.std(by_order)),
            "std_across_seeds": float(np.std(by_seed)),
            "n_runs": len(vals),
        })
    return rows


def summary_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([r["metric"], repr(r["mean"]), repr(r["std_across_orders"]),
                    repr(r["std_across_seeds"]), r["n_runs"]])
    return out.getvalue()


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"metric": r["metric"], "mean": float(r["mean"]),
                 "std_across_orders": float(r["std_across_orders"]),
                 "std_across_seeds": float(r["std_across_seeds"]), "n_runs": int(r["n_runs"])}
                for r in csv.DictReader(fh)]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def run_experiment(cfg: RunConfig, workers: int = 1) -> dict:
    """Run every (order, seed) pair, write bundles, ``summary.csv`` and ``manifest.json``."""
    out = Path(cfg.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    started = _now()
    jobs = [(o, s) for o in cfg.orders for s in cfg.seeds]
    args = [(cfg.to_dict(), o, s, str(out)) for o, s in jobs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_one_run, *zip(*args)))
    else:
        entries = [_one_run(*a) for a in args]

    per_run = {(e["order"], e["seed"]): read_metrics(out / e["path"])
               for e in entries if e["status"] == "ok"}
    atomic_write(out / "summary.csv", summary_csv(summarize(per_run)))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "summary": "summary.csv",
        "runs": entries,
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ContractError(f"manifest not found: {path}")
    return json.loads(path.read_text()), path.parent


def verify(path, tol: float = 1e-12) -> list[str]:
    """Recompute every stored metric and summary number; return the mismatches."""
    manifest, root = load_manifest(path)
    literal = bool(manifest["config"].get("fwt_paper_literal", False))
    problems, per_run = [], {}
    for e in manifest["runs"]:
        if e["status"] != "ok":
            continue
        d = root / e["path"]
        stored, fresh = read_metrics(d), recompute_metrics(d, literal)
        per_run[(e["order"], e["seed"])] = fresh
        for name in METRICS:
            if abs(stored[name] - fresh[name]) > tol:
                problems.append(f"{e['path']}: {name} stored {stored[name]!r} recomputed {fresh[name]!r}")
    stored_rows = {r["metric"]: r for r in read_summary(root / manifest["summary"])}
    for row in summarize(per_run):
        old = stored_rows.get(row["metric"])
        if old is None:
            problems.append(f"summary: missing metric {row['metric']}")
            continue
        for col in SUMMARY_COLUMNS[1:]:
            if abs(old[col] - row[col]) > tol:
                problems.append(f"summary: {row['metric']}.{col} stored {old[col]!r} recomputed {row[col]!r}")
    return problems


def _forgetting_series(matrix) -> list[float]:
    """Mean drop of earlier tasks after each task t >= 2."""
    diag = np.diag(matrix.acc)
    return [float(np.mean(diag[:t] - matrix.acc[t, :t])) for t in range(1, matrix.n_tasks)]


def _csv(header, rows, warnings) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    if warnings:
        out.write("# warnings\n")
        for msg in warnings:
            out.write(f"# {msg}\n")
    return out.getvalue()


def emit_plot_data(paths, kind: str) -> str:
    """Plot-ready CSV for one or more experiment manifests."""
    if kind not in PLOT_KINDS:
        raise ContractError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    warnings = []
    loaded = []
    for p in paths:
        try:
            loaded.append(load_manifest(p))
        except ContractError as exc:
            warnings.append(str(exc))

    def good_runs(manifest, root):
        for e in manifest["runs"]:
            d = root / e["path"]
            if e["status"] != "ok":
                warnings.append(f"{manifest['config']['method']} {e['path']}: run failed ({e.get('error')})")
            elif not (d / "matrix.csv").exists():
                warnings.append(f"{manifest['config']['method']} {e['path']}: bundle missing")
            else:
                yield e, d

    rows = []
    if kind == "forgetting_over_time":
        for manifest, root in loaded:
            series = [_forgetting_series(read_matrix_csv(d / "matrix.csv")) for _, d in good_runs(manifest, root)]
            if series:
                for t, vals in enumerate(zip(*series), start=2):
                    rows.append((manifest["config"]["method"], t, float(np.mean(vals))))
        return _csv(("method", "step_t", "forgetting"), rows, warnings)

    if kind == "acc_by_order":
        for manifest, root in loaded:
            acc = {}
            for e, d in good_runs(manifest, root):
                acc.setdefault(e["order"], []).append(read_metrics(d)["ACC"])
            for order in manifest["config"]["orders"]:
                if order in acc:
                    rows.append((manifest["config"]["method"], order, float(np.mean(acc[order]))))
        return _csv(("method", "order", "ACC"), rows, warnings)

    for manifest, root in loaded:
        metrics = [read_metrics(d) for _, d in good_runs(manifest, root)]
        p = manifest["config"].get("p")
        if p is None:
            warnings.append(f"{manifest['config']['method']}: no alignment percentage, skipped")
        elif metrics:
            rows.append((float(p), *(float(np.mean([m[k] for m in metrics])) for k in METRICS)))
    rows.sort(key=lambda r: r[0])
    return _csv(("p", *METRICS), rows, warnings)


__all__ = ["PLOT_KINDS", "emit_plot_data", "load_manifest", "read_summary", "run_experiment",
           "summarize", "verify"]
