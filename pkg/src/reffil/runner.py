"""Run directories: persistence of a federated run and cross-run reports.

Layout of a run directory::

    config.snapshot        YAML config actually used (seed included)
    rounds.csv             one row per (round, client): losses and temperature
    evals.csv              after-task accuracy matrix, long format
    prompts/round_<r>.json global prompt set after global round r
    checkpoints/task_<t>.bin  global model after task t (npz container)
    summary.json           avg, last, fgt, bwt as fractions
    error.json             only when the run aborted
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import traceback
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import ExperimentConfig, dump_config, load_config
from .federation import RoundRecord, ShardStore, run_federated
from .model import aggregation_manifest

ROUND_FIELDS = [f.name for f in dataclasses.fields(RoundRecord)]
MANIFEST_KEY = "__manifest__"


def method_label(cfg: ExperimentConfig) -> str:
    """``reffil``, ``finetune`` or an ablation tag such as ``reffil[ce+gpl]``."""
    if cfg.method != "reffil" or (cfg.loss.use_gpl and cfg.loss.use_dpcl):
        return cfg.method
    parts = ["ce"] + (["gpl"] if cfg.loss.use_gpl else []) + (["dpcl"] if cfg.loss.use_dpcl else [])
    return f"reffil[{'+'.join(parts)}]"


def save_checkpoint(path, net) -> None:
    """Write the state dict in canonical order plus its manifest (JSON) into one npz file."""
    manifest = aggregation_manifest(net)
    arrays = OrderedDict((k, v.detach().cpu().numpy()) for k, v in net.state_dict().items())
    arrays[MANIFEST_KEY] = np.array(json.dumps({"order": list(arrays), "tensors": manifest}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(str(data[MANIFEST_KEY]))
        params = OrderedDict((k, data[k]) for k in manifest["order"] if k != MANIFEST_KEY)
    return params, manifest["tensors"]


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_evals(path, accuracy: Sequence[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task", "eval_task", "accuracy"])
        for i, row in enumerate(accuracy, start=1):
            for j, acc in enumerate(row, start=1):
                w.writerow([i, j, _fmt(acc)])


def read_evals(path) -> list[list[float]]:
    rows: dict[int, dict[int, float]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["after_task"]), {})[int(rec["eval_task"])] = float(rec["accuracy"])
    return [[rows[i][j] for j in sorted(rows[i])] for i in sorted(rows)]


def summary_payload(accuracy, method: str, seed: int) -> dict:
    out = {"method": method, "seed": seed}
    out.update({k: round(v, 6) for k, v in metrics.summarize(accuracy).items()})
    return out


def run_experiment(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> Path:
    """Run ``cfg`` and persist everything under ``out_dir``.

    On failure the directory keeps whatever was written so far plus
    ``error.json``, and the exception propagates.
    """
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    cfg.validate()
    out = Path(out_dir)
    (out / "prompts").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    dump_config(cfg, out / "config.snapshot")

    rounds_fh = open(out / "rounds.csv", "w", newline="")
    writer = csv.writer(rounds_fh, lineterminator="\n")
    writer.writerow(ROUND_FIELDS)
    accuracy: list[list[float]] = []
    store = ShardStore()

    def on_round(global_round, task, prompts, records):
        for rec in records:
            writer.writerow([_fmt(getattr(rec, name)) for name in ROUND_FIELDS])
        rounds_fh.flush()
        if prompts:
            prompts.save(out / "prompts" / f"round_{global_round}.json", global_round, task=task)

    def on_task_end(task, net, row):
        accuracy.append(row)
        save_checkpoint(out / "checkpoints" / f"task_{task}.bin", net)
        write_evals(out / "evals.csv", accuracy)

    try:
        result = run_federated(cfg, on_round=on_round, on_task_end=on_task_end, store=store)
    except BaseException as exc:
        with open(out / "error.json", "w") as fh:
            json.dump(
                {
                    "error": type(exc).__name__,
                    "message": str(exc),
                    "completed_tasks": len(accuracy),
                    "traceback": traceback.format_exc(),
                },
                fh,
                indent=2,
            )
        raise
    finally:
        rounds_fh.close()

    summary = summary_payload(result.accuracy, method_label(cfg), cfg.seed)
    summary["audit"] = result.audit
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return out


def evaluate_run(run_dir) -> dict:
    """Recompute the summary of a finished (or partial) run from its evals.csv."""
    run = Path(run_dir)
    cfg = load_config(run / "config.snapshot")
    return summary_payload(read_evals(run / "evals.csv"), method_label(cfg), cfg.seed)


def read_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: missing summary.json")
    with open(path) as fh:
        return json.load(fh)


REPORT_COLUMNS = ("method", "seed", "avg", "last", "fgt", "bwt")
METRIC_COLUMNS = REPORT_COLUMNS[2:]


def report_rows(runs: Sequence) -> tuple[list[dict], list[dict]]:
    """Per-run rows sorted by (method, seed) and per-method mean/std rows."""
    rows = [{k: read_summary(r)[k] for k in REPORT_COLUMNS} for r in runs]
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    agg = []
    for method in sorted({r["method"] for r in rows}):
        vals = [r for r in rows if r["method"] == method]
        entry = {"method": method, "n": len(vals)}
        for m in METRIC_COLUMNS:
            xs = np.array([r[m] for r in vals], dtype=np.float64)
            entry[m] = float(xs.mean())
            entry[m + "_std"] = float(xs.std(ddof=1)) if len(xs) > 1 else 0.0
        agg.append(entry)
    return rows, agg


def emit_report(runs: Sequence, out_dir=None) -> dict:
    """Render run summaries as CSV and as a text table (percent scale).

    Returns ``{"csv": ..., "text": ...}``; when ``out_dir`` is given the two
    are also written to ``report.csv`` and ``report.txt`` there.
    """
    rows, agg = report_rows(runs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", *REPORT_COLUMNS, *(m + "_std" for m in METRIC_COLUMNS)])
    for r in rows:
        w.writerow(["run", *(_fmt(r[k]) for k in REPORT_COLUMNS), *[""] * len(METRIC_COLUMNS)])
    for a in agg:
        w.writerow(
            ["mean", a["method"], a["n"], *(_fmt(a[m]) for m in METRIC_COLUMNS), *(_fmt(a[m + "_std"]) for m in METRIC_COLUMNS)]
        )
    csv_text = buf.getvalue()

    width = max([len("method")] + [len(r["method"]) for r in rows]) + 2
    lines = [f"{'method':<{width}}{'seed':>6}{'Avg%':>9}{'Last%':>9}{'FGT':>9}{'BwT':>9}"]
    for r in rows:
        lines.append(
            f"{r['method']:<{width}}{r['seed']:>6}{100 * r['avg']:>9.2f}{100 * r['last']:>9.2f}{r['fgt']:>9.3f}{r['bwt']:>9.3f}"
        )
    lines.append("")
    for a in agg:
        lines.append(
            f"{a['method']:<{width}}{'n=' + str(a['n']):>6}"
            f"{100 * a['avg']:>6.2f}±{100 * a['avg_std']:<5.2f}{100 * a['last']:>6.2f}±{100 * a['last_std']:<5.2f}"
            f"{a['fgt']:>7.3f}±{a['fgt_std']:<6.3f}{a['bwt']:>7.3f}±{a['bwt_std']:.3f}"
        )
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        Path(out_dir, "report.csv").write_text(csv_text)
        Path(out_dir, "report.txt").write_text(text)
    return {"csv": csv_text, "text": text}
