"""Static figures for a metrics report, written next to its CSV files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes independent of the matplotlib build
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _arr(v) -> np.ndarray:
    return np.array([np.nan if x is None else x for x in v], dtype=float)


def skill_figure(report: Mapping, path: Path) -> Path:
    m, leads = report["metrics"], report["leads"]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    ax = axes[0]
    ax.plot(leads, _arr(m["crps"]["value"]), "o-", label="CRPS")
    ax.plot(leads, _arr(m["rmse"]["value"]), "s-", label="ensemble-mean RMSE")
    if "spread" in m:
        ax.plot(leads, _arr(m["spread"]["value"]), "^--", label="spread")
    ax.set_xlabel("lead (frames)")
    ax.legend(fontsize=8)
    ax = axes[1]
    if "spread_skill" in m:
        ax.plot(leads, _arr(m["spread_skill"]["value"]), "o-")
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xlabel("lead (frames)")
    ax.set_ylabel("spread / skill")
    return _save(fig, path)


def pooled_figure(report: Mapping, path: Path) -> Path:
    m, leads = report["metrics"], report["leads"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(k for k in m if k.startswith("crps_avg_w") or k.startswith("crps_max_w")):
        ax.plot(leads, _arr(m[name]["value"]), label=name[5:], lw=1)
    ax.set_xlabel("lead (frames)")
    ax.set_ylabel("pooled CRPS")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def spectrum_figure(report: Mapping, path: Path, leads=(1, 5, 10)) -> Path:
    s = report["spectrum"]
    k = np.asarray(s["wavenumber"])[1:]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for lead in leads:
        if lead > len(report["leads"]):
            continue
        (line,) = ax.loglog(k, _arr(s["forecast"][lead - 1])[1:], label=f"forecast lead {lead}")
        ax.loglog(k, _arr(s["truth"][lead - 1])[1:], "--", color=line.get_color(), lw=0.8)
    ax.set_xlabel("wavenumber")
    ax.set_ylabel("power (dashed: truth)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def rev_figure(report: Mapping, path: Path, lead: int = 5) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lead = min(lead, len(report["leads"]))
    for key, e in report["rev"].items():
        ax.plot(e["cost_loss"], _arr(e["value"][lead - 1]), label=key)
    ax.set_ylim(-0.2, 1.0)
    ax.set_xlabel("cost/loss ratio")
    ax.set_ylabel(f"REV at lead {lead}")
    ax.legend(fontsize=7)
    return _save(fig, path)


def comparison_figure(comparison: Mapping, leads, path: Path, metrics=("crps", "rmse")) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in metrics:
        if name not in comparison:
            continue
        e = comparison[name]
        (line,) = ax.plot(leads, _arr(e["mean_diff"]), label=name)
        ax.fill_between(leads, _arr(e["ci_low"]), _arr(e["ci_high"]), color=line.get_color(), alpha=0.2)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("lead (frames)")
    ax.set_ylabel("paired difference")
    ax.legend(fontsize=8)
    return _save(fig, path)


def write_figures(report: Mapping, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [skill_figure(report, out_dir / "skill.png"), pooled_figure(report, out_dir / "pooled_crps.png")]
    if "spectrum" in report:
        paths.append(spectrum_figure(report, out_dir / "spectrum.png"))
    if "rev" in report:
        paths.append(rev_figure(report, out_dir / "rev.png"))
    if "comparison" in report:
        paths.append(comparison_figure(report["comparison"], report["leads"], out_dir / "comparison.png"))
    return paths
