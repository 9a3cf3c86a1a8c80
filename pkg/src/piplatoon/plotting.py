"""Figures for simulation traces (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sim import TraceRecord  # noqa: E402


def _series(trace: list[TraceRecord]):
    times = [r.time for r in trace]
    ids = [v.id for v in trace[0].vehicles]
    col = {vid: k for k, vid in enumerate(ids)}
    return times, ids, col


def plot_trace(trace: list[TraceRecord], out_dir: str | Path, d: float | None = None, stem: str = "run") -> list[Path]:
    """Write longitudinal, lateral and gap figures; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not trace:
        return []
    times, ids, col = _series(trace)
    paths = []

    fig, ax = plt.subplots(figsize=(8, 4.5))
    lead = [r.vehicles[0].long for r in trace]
    for vid in ids:
        ax.plot(times, [r.vehicles[col[vid]].long - x0 for r, x0 in zip(trace, lead)], label=f"v{vid}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel(f"position relative to v{ids[0]} [m]")
    ax.legend(ncol=3, fontsize="small")
    ax.grid(alpha=0.3)
    paths.append(out_dir / f"{stem}_long.png")
    fig.tight_layout()
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3.5))
    for vid in ids:
        ax.plot(times, [r.vehicles[col[vid]].lat for r in trace], label=f"v{vid}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("lateral position [m]")
    ax.legend(ncol=3, fontsize="small")
    ax.grid(alpha=0.3)
    paths.append(out_dir / f"{stem}_lat.png")
    fig.tight_layout()
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(times, [r.min_gap for r in trace], color="k", label="min same-lane gap")
    if d is not None:
        ax.axhline(d, color="g", ls="--", label="d")
        ax.axhline(0.5 * d, color="r", ls=":", label="0.5 d")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("gap [m]")
    ax.legend(fontsize="small")
    ax.grid(alpha=0.3)
    paths.append(out_dir / f"{stem}_gap.png")
    fig.tight_layout()
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths
