"""Figures as PNG plus gnuplot-ready .dat files.

The PNGs are written without a Software/date stamp so that reruns on the
same data produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import ConcentrationCurves, LoopStats, StabilityReport  # noqa: E402
from .attack import AttackTimeline  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _write_dat(path: Path, columns: Sequence[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in rows:
            fh.write(" ".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def stability_figure(reports: Mapping[str, StabilityReport], out_dir: Path, stem: str = "stability") -> list[Path]:
    """Range bars of blowback and active prevalence per protocol, first round marked."""
    out_dir = Path(out_dir)
    labels = list(reports)
    rows = []
    for i, label in enumerate(labels):
        r = reports[label]
        blo, bhi = r.blowback_range
        alo, ahi = r.active_range
        rows.append((i, label, blo, bhi, r.first_round.blowback, alo, ahi, r.first_round.active))
    paths = [_write_dat(out_dir / f"{stem}.dat",
                        ("idx", "protocol", "bb_min", "bb_max", "bb_first", "act_min", "act_max", "act_first"), rows)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, _, blo, bhi, bfirst, alo, ahi, afirst in rows:
        ax.vlines(i - 0.1, blo, bhi, color="tab:red", linewidth=4, label="blowback" if i == 0 else None)
        ax.vlines(i + 0.1, alo, ahi, color="tab:blue", linewidth=4, label="active" if i == 0 else None)
        ax.plot([i - 0.1], [bfirst], "k_", markersize=12)
        ax.plot([i + 0.1], [afirst], "k_", markersize=12)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("fraction of full-scan BBGs")
    if rows:
        ax.legend(loc="lower right")
    paths.append(_save(fig, out_dir / f"{stem}.png"))
    return paths


def concentration_figure(curves: ConcentrationCurves, out_dir: Path, stem: str = "concentration") -> list[Path]:
    out_dir = Path(out_dir)
    rounds = sorted(curves.curves)
    n = len(curves.ranked_ips)
    rows = [(rank + 1, *(curves.curves[r][rank] for r in rounds)) for rank in range(n)]
    paths = [_write_dat(out_dir / f"{stem}.dat", ("rank", *(f"round{r}" for r in rounds)), rows)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in rounds:
        ax.plot(range(1, n + 1), curves.curves[r], label=str(r))
    ax.set_xlabel("top-X generators")
    ax.set_ylabel("cumulative packets")
    if n:
        ax.set_xscale("log")
        ax.legend(title="round", fontsize="small")
    paths.append(_save(fig, out_dir / f"{stem}.png"))
    return paths


def loops_figure(stats: Mapping[str, LoopStats], out_dir: Path, stem: str = "loops") -> list[Path]:
    out_dir = Path(out_dir)
    labels = list(stats)
    rows = [(label, s.total, s.looping, s.prevalence if s.prevalence is not None else "undefined")
            for label, s in stats.items()]
    paths = [_write_dat(out_dir / f"{stem}.dat", ("protocol", "paths", "looping", "prevalence"), rows)]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(labels)), [s.prevalence or 0.0 for s in stats.values()], color="tab:gray")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylim(0, 1)
    ax.set_ylabel("paths with a loop")
    paths.append(_save(fig, out_dir / f"{stem}.png"))
    return paths


def attack_figure(timeline: AttackTimeline, out_dir: Path, stem: str = "attack") -> list[Path]:
    out_dir = Path(out_dir)
    paths = [_write_dat(out_dir / f"{stem}.dat", ("second", "pps", "Bps"), timeline.rows())]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    secs = list(range(timeline.duration))
    ax.step(secs, timeline.pps, where="post", label="packets/s")
    ax.step(secs, timeline.bps, where="post", label="bytes/s")
    ax.set_xlabel("seconds after attack start")
    if timeline.total_packets:
        ax.set_yscale("log")
        ax.legend()
    paths.append(_save(fig, out_dir / f"{stem}.png"))
    return paths


def timing_figure(histograms: Mapping[str, Sequence[int]], out_dir: Path, stem: str = "timing") -> list[Path]:
    """One small panel per generator."""
    out_dir = Path(out_dir)
    labels = list(histograms)
    width = max((len(h) for h in histograms.values()), default=0)
    rows = [(s, *(histograms[k][s] if s < len(histograms[k]) else 0 for k in labels)) for s in range(width)]
    paths = [_write_dat(out_dir / f"{stem}.dat", ("second", *labels), rows)]
    cols = min(4, max(1, len(labels)))
    nrows = max(1, -(-len(labels) // cols))
    fig, axes = plt.subplots(nrows, cols, figsize=(3 * cols, 2.2 * nrows), squeeze=False)
    for ax, label in zip(axes.flat, labels):
        h = histograms[label]
        ax.bar(range(len(h)), h, width=1.0, color="tab:purple")
        ax.set_title(label, fontsize="small")
    for ax in list(axes.flat)[len(labels):]:
        ax.axis("off")
    paths.append(_save(fig, out_dir / f"{stem}.png"))
    return paths
