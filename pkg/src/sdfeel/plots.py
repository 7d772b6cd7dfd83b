"""Render figures from exported trace CSVs, saved next to them in the run directory."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ConfigurationError
from .metrics import MetricsRecord, load_trace


def _discover_traces(run_dir: Path) -> dict[str, list[MetricsRecord]]:
    traces: dict[str, list[MetricsRecord]] = {}
    for path in sorted(run_dir.glob("*.csv")):
        stem = path.stem
        for mode in ("async", "sync"):
            if stem.endswith(f"_{mode}"):
                traces[mode] = load_trace(path)
    return traces


def _plot_series(ax, traces, x_of, y_of, styles):
    for mode, records in traces.items():
        xs = [x_of(r) for r in records]
        ys = [y_of(r) for r in records]
        ax.plot(xs, ys, label=mode, **styles.get(mode, {}))


_STYLES = {"async": {"color": "tab:blue"}, "sync": {"color": "tab:orange", "linestyle": "--"}}


def render_report(run_dir: str | Path) -> list[Path]:
    """Render loss/gradient/consensus/staleness figures for every trace found.

    Returns the written figure paths. Raises if the directory has no traces.
    """
    run_dir = Path(run_dir)
    traces = _discover_traces(run_dir)
    if not traces:
        raise ConfigurationError(f"no *_async.csv or *_sync.csv traces in {run_dir}")
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    _plot_series(ax, traces, lambda r: r.sim_time, lambda r: r.global_loss, _STYLES)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = run_dir / "loss_vs_time.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    _plot_series(ax, traces, lambda r: r.k, lambda r: r.grad_norm_sq, _STYLES)
    ax.set_xlabel("global iteration k")
    ax.set_ylabel("squared gradient norm")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = run_dir / "grad_norm_vs_iter.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, records in traces.items():
        pts = [(r.k, r.consensus_error) for r in records if r.consensus_error > 0]
        if pts:
            ax.semilogy([p[0] for p in pts], [p[1] for p in pts],
                        label=mode, **_STYLES.get(mode, {}))
    ax.set_xlabel("global iteration k")
    ax.set_ylabel("consensus error")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = run_dir / "consensus_error_vs_iter.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    _plot_series(ax, traces, lambda r: r.k, lambda r: r.max_staleness, _STYLES)
    ax.set_xlabel("global iteration k")
    ax.set_ylabel("max staleness")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = run_dir / "staleness_vs_iter.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if any(r.test_accuracy is not None for records in traces.values() for r in records):
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode, records in traces.items():
            pts = [(r.sim_time, r.test_accuracy) for r in records
                   if r.test_accuracy is not None]
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts],
                        label=mode, **_STYLES.get(mode, {}))
        ax.set_xlabel("simulated time (s)")
        ax.set_ylabel("test accuracy")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = run_dir / "accuracy_vs_time.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
