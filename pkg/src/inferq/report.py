"""Render benchmark and cluster-compile reports to files.

Each report writes the delimited metrics (CSV + JSON) next to the rendered
matplotlib figures so results can be inspected without re-running anything.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_BENCH_FIELDS = ["batch_size", "threads", "max_rows", "rows", "result_rows",
                 "mean_s", "rows_per_s", "node_visits", "visits_per_row"]


def write_bench_report(entries: list[dict], outdir: str | Path) -> list[Path]:
    """bench_results.{json,csv} plus throughput figures; returns written paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = outdir / "bench_results.json"
    json_path.write_text(json.dumps(entries, indent=2))
    written.append(json_path)

    csv_path = outdir / "bench_results.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_BENCH_FIELDS, extrasaction="ignore")
        w.writeheader()
        for e in entries:
            w.writerow(e)
    written.append(csv_path)

    by_threads: dict[int, list[dict]] = {}
    for e in entries:
        by_threads.setdefault(e["threads"], []).append(e)
    if any(len(v) > 1 for v in by_threads.values()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for threads, group in sorted(by_threads.items()):
            group = sorted(group, key=lambda e: e["batch_size"])
            ax.plot([e["batch_size"] for e in group],
                    [e["rows_per_s"] for e in group],
                    marker="o", label=f"{threads} worker(s)")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("batch size")
        ax.set_ylabel("rows / s")
        ax.set_title("Inference throughput vs. batch size")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
        path = outdir / "bench_batch_throughput.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    by_batch: dict[int, list[dict]] = {}
    for e in entries:
        by_batch.setdefault(e["batch_size"], []).append(e)
    if any(len(v) > 1 for v in by_batch.values()):
        fig, ax = plt.subplots(figsize=(6, 4))
        for batch, group in sorted(by_batch.items()):
            group = sorted(group, key=lambda e: e["threads"])
            base = group[0]["rows_per_s"]
            ax.plot([e["threads"] for e in group],
                    [e["rows_per_s"] / base for e in group],
                    marker="o", label=f"batch {batch}")
        ax.set_xlabel("workers")
        ax.set_ylabel("speedup vs. 1 worker")
        ax.set_title("Scan+predict scaling")
        ax.grid(True, alpha=0.3)
        ax.legend()
        path = outdir / "bench_thread_speedup.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    return written


def write_cluster_report(report: dict, outdir: str | Path) -> list[Path]:
    """cluster_report.{json,csv} plus a per-cluster feature-count figure."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = outdir / "cluster_report.json"
    json_path.write_text(json.dumps(report, indent=2))
    written.append(json_path)

    csv_path = outdir / "cluster_report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "features", "constants"])
        for i, c in enumerate(report["clusters"]):
            w.writerow([i, c["features"],
                        ";".join(f"{k}={v}" for k, v in c["constants"].items())])
    written.append(csv_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    xs = list(range(len(report["clusters"])))
    ax.bar(xs, [c["features"] for c in report["clusters"]], label="specialized")
    ax.axhline(report["original_features"], color="tab:red", linestyle="--",
               label="original")
    ax.set_xlabel("cluster")
    ax.set_ylabel("model features")
    ax.set_title(f"Features per specialized model (k={report['k']})")
    ax.set_xticks(xs)
    ax.legend()
    path = outdir / "cluster_features.png"
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
