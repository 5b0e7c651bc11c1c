"""Rendered PNG figures for learning curves and ablation sweeps.

Figures are produced alongside the plot-ready CSVs (never instead of them) so
runs are inspectable without any further tooling.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _series(agg_records: list[dict], key: str):
    x = np.array([rec["iteration"] for rec in agg_records], dtype=float)
    mean = np.array([rec.get(f"{key}_mean", np.nan) for rec in agg_records], dtype=float)
    err = np.array([rec.get(f"{key}_stderr", np.nan) for rec in agg_records], dtype=float)
    return x, mean, err


def learning_curve_figure(curves: dict[str, list[dict]], out_path,
                          metric: str = "mean_episode_reward",
                          title: str | None = None) -> None:
    """Mean ± standard-error band per labeled aggregate stream."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, agg in curves.items():
        if not agg:
            continue
        x, mean, err = _series(agg, metric)
        ax.plot(x, mean, label=label, linewidth=1.6)
        band = np.nan_to_num(err, nan=0.0)
        ax.fill_between(x, mean - band, mean + band, alpha=0.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric)
    ax.set_title(title or metric)
    if curves:
        ax.legend(loc="best", fontsize=9)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def ablation_figure(rows: list[dict], axis_name: str, out_path,
                    value_key: str = "value", metric_key: str = "final_reward") -> None:
    """Final-window reward vs. swept value, mean ± standard error across seeds."""
    values = sorted({row[value_key] for row in rows})
    means, errs = [], []
    for v in values:
        group = np.array([row[metric_key] for row in rows if row[value_key] == v],
                         dtype=float)
        finite = group[~np.isnan(group)]
        if finite.size == 0:
            means.append(np.nan)
            errs.append(0.0)
        else:
            means.append(float(finite.mean()))
            errs.append(
                float(finite.std(ddof=1) / np.sqrt(finite.size)) if finite.size > 1 else 0.0
            )
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(values, means, yerr=errs, marker="o", capsize=4, linewidth=1.6)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("final-window mean episode reward")
    ax.set_title(f"ablation over {axis_name}")
    ax.set_xticks(values)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
