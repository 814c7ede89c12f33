"""Matplotlib renderings of run reports and listing statistics.

All functions write image files and return the paths written; matplotlib is
imported lazily with the Agg backend so headless use and plain CLI commands
stay cheap.
"""

from __future__ import annotations

from pathlib import Path

from .cis import CfiStats
from .sim import MetricsBundle


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_detect_time_fit(bundle: MetricsBundle, out_dir: str | Path) -> Path | None:
    """Scatter of detection time against control-flow instruction count,
    with the least-squares line when available. Returns None when the
    bundle has no per-process metrics."""
    if not bundle.per_process:
        return None
    plt = _plt()
    xs = [m.cfi_count for m in bundle.per_process]
    ys = [m.time_detect for m in bundle.per_process]

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.scatter(xs, ys, color="tab:blue", zorder=3, label="processes")
    if bundle.fit is not None:
        lo, hi = min(xs), max(xs)
        ax.plot(
            [lo, hi],
            [bundle.fit.slope * lo + bundle.fit.intercept, bundle.fit.slope * hi + bundle.fit.intercept],
            color="tab:red",
            label=f"fit (r2={bundle.fit.r2:.3f})",
        )
    ax.set_xlabel("control-flow instructions")
    ax.set_ylabel("detection time (s)")
    ax.set_title("Detection time scaling")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(out_dir) / "detect_time_fit.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_overhead(bundle: MetricsBundle, out_dir: str | Path) -> Path | None:
    """Per-process overhead bars; skipped entirely when no process has a
    defined overhead (zero execution time everywhere)."""
    rows = [(m.process_id, m.overhead_percent) for m in bundle.per_process if m.overhead_percent is not None]
    if not rows:
        return None
    plt = _plt()
    names = [r[0] for r in rows]
    values = [r[1] for r in rows]

    fig, ax = plt.subplots(figsize=(max(6.4, 0.45 * len(rows)), 4.2))
    ax.bar(range(len(rows)), values, color="tab:purple")
    if bundle.mean_overhead_percent is not None:
        ax.axhline(bundle.mean_overhead_percent, color="tab:red", linestyle="--",
                   label=f"mean {bundle.mean_overhead_percent:.2f}%")
        ax.legend()
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("overhead (%)")
    ax.set_title("Detection overhead per process")
    fig.tight_layout()
    path = Path(out_dir) / "overhead.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_cfi_fractions(stats_by_name: dict[str, CfiStats], out_dir: str | Path) -> Path | None:
    """Grouped bars of jump/call/return shares per listing."""
    if not stats_by_name:
        return None
    plt = _plt()
    names = list(stats_by_name)
    jumps = [100 * stats_by_name[n].jump_fraction for n in names]
    calls = [100 * stats_by_name[n].call_fraction for n in names]
    returns = [100 * stats_by_name[n].return_fraction for n in names]

    width = 0.27
    xs = range(len(names))
    fig, ax = plt.subplots(figsize=(max(6.4, 0.6 * len(names)), 4.2))
    ax.bar([x - width for x in xs], jumps, width, label="jumps", color="tab:blue")
    ax.bar(list(xs), calls, width, label="calls", color="tab:orange")
    ax.bar([x + width for x in xs], returns, width, label="returns", color="tab:green")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("share of instructions (%)")
    ax.set_title("Control-flow instruction mix")
    ax.legend()
    fig.tight_layout()
    path = Path(out_dir) / "cfi_fractions.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
