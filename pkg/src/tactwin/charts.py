"""Best-effort SVG charts for evaluation reports.

Chart emission never participates in exit-code semantics; the TSV tables are
the contract. Half-violins use a Gaussian kernel-density estimate with
Scott's bandwidth, clipped to the observed range.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _kde(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < 2 or np.std(values) == 0:
        out = np.zeros_like(grid)
        out[np.argmin(np.abs(grid - np.median(values)))] = 1.0
        return out
    bw = 1.06 * np.std(values) * len(values) ** (-1 / 5)
    diffs = (grid[:, None] - values[None, :]) / bw
    return np.exp(-0.5 * diffs**2).sum(axis=1) / (len(values) * bw * np.sqrt(2 * np.pi))


def half_violin_chart(report, key: str, path, title: str | None = None) -> Path | None:
    """Per-force-bin half-violins of one error column; returns None on failure."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception:
        return None
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, b in enumerate(report.bins):
        values = b.values.get(key)
        if values is None or len(values) == 0:
            continue
        lo, hi = values.min(), values.max()
        pad = 0.05 * (hi - lo + 1e-9)
        grid = np.linspace(lo - pad, hi + pad, 120)
        density = _kde(values, grid)
        if density.max() > 0:
            density = density / density.max() * 0.4
        ax.fill_betweenx(grid, i, i + density, alpha=0.6, color="tab:orange")
        ax.plot([i - 0.08, i + 0.08], [np.median(values)] * 2, color="black", lw=1.5)
    ax.set_xticks(range(len(report.bins)))
    ax.set_xticklabels([f"{b.lo:.1f}-{b.hi:.1f}" for b in report.bins], fontsize=8)
    ax.set_xlabel("applied force magnitude [N]")
    ax.set_ylabel(key.replace("_", " "))
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def median_curve_chart(rows: list[dict], x_key: str, y_key: str, path, group_key: str | None = None,
                       title: str | None = None) -> Path | None:
    """Median trend lines, e.g. error versus training fraction."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception:
        return None
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = sorted({r.get(group_key) for r in rows}) if group_key else [None]
    for g in groups:
        sel = [r for r in rows if group_key is None or r.get(group_key) == g]
        xs = sorted({r[x_key] for r in sel})
        med = [np.median([r[y_key] for r in sel if r[x_key] == x]) for x in xs]
        ax.plot(xs, med, marker="o", label=str(g) if g is not None else y_key)
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    if group_key or title:
        ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
