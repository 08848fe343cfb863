"""Optional figures for the CLI. CSV files stay the primary output."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    logger.info("wrote %s", path)
    return path


def latency_boxplot(latencies: dict[str, list[float]], out_dir: Path, name="latency.png") -> Path:
    """Box plot of read latencies (ms), one box per label. Outliers hidden."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(latencies)), 4))
    labels = list(latencies)
    ax.boxplot([[x * 1e3 for x in latencies[k]] for k in labels], showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right")
    ax.set_ylabel("read latency (ms)")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out_dir, name)


def theory_curves(rows: list[dict], out_dir: Path, name="theory.png") -> Path:
    ns = [r["n"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(ns, [r["p_cp"] for r in rows], "o-", label="P(CP), m <= N-1")
    a1.plot(ns, [r["p_cp_closed"] for r in rows], "s--", label="1 - p0^(N-1)")
    a1.set_xlabel("replicas (N = n)")
    a1.set_ylim(0, 1)
    a1.legend()
    for key, label in (("p_rwp_given_cp", "P(RWP|CP)"), ("p_oni", "P(ONI)")):
        pts = [(r["n"], r[key]) for r in rows if r[key] > 0]
        if pts:
            a2.semilogy(*zip(*pts), "o-", label=label)
    a2.set_xlabel("replicas (N = n)")
    a2.legend()
    for ax in (a1, a2):
        ax.grid(alpha=0.3)
    return _save(fig, out_dir, name)


def compare_bars(rows: list[dict], out_dir: Path, name="compare.png") -> Path:
    """Theory against empirical value per (N, n, metric)."""
    labels = [f"{r['metric']}\nN={r['N']} n={r['n']}" for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 4))
    ax.bar([i - 0.2 for i in x], [r["theory"] for r in rows], 0.4, label="theory")
    ax.bar([i + 0.2 for i in x], [r["empirical"] for r in rows], 0.4, label="empirical")
    ax.set_xticks(list(x), labels, fontsize=7)
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, out_dir, name)


def staleness_bars(hist: dict[int, int], out_dir: Path, name="staleness.png") -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    ks = sorted(hist)
    ax.bar(ks, [hist[k] for k in ks])
    ax.set_xticks(ks)
    ax.set_xlabel("staleness (versions)")
    ax.set_ylabel("reads")
    ax.set_yscale("log")
    return _save(fig, out_dir, name)
