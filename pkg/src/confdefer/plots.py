"""Figure rendering for sweep reports.

Renders the two standard panels next to the delimited output: the evaluation
metric (oracle regret, or the worst-case certificate on real logs) against
the specified sensitivity level, one line per method with seed error bars,
and the deferral fraction against the same grid.
"""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 9,
    "axes.labelsize": 11,
})

_METHOD_STYLE = {
    "human": dict(color="tab:gray", marker="s"),
    "ao": dict(color="tab:orange", marker="v"),
    "confao": dict(color="tab:red", marker="^"),
    "hai": dict(color="tab:green", marker="D"),
    "confhai": dict(color="tab:blue", marker="o"),
    "confhai-person": dict(color="tab:purple", marker="*"),
}


def _collect(report, value_of):
    """Per (method, gamma label): mean and std of a row statistic over seeds."""
    labels = []
    for entry in report.config.log_gamma_grid:
        labels.append(json.dumps(list(entry), separators=(",", ":"))
                      if isinstance(entry, tuple) else json.dumps(entry))
    series = {}
    for method in report.config.methods:
        means, stds = [], []
        for label in labels:
            vals = [value_of(r) for r in report.rows
                    if r.method == method and r.gamma_label == label
                    and r.error is None and value_of(r) is not None]
            means.append(np.mean(vals) if vals else np.nan)
            stds.append(np.std(vals, ddof=1) if len(vals) > 1 else 0.0)
        series[method] = (np.asarray(means, dtype=float), np.asarray(stds, dtype=float))
    return labels, series


def _draw(report, value_of, ylabel, path):
    labels, series = _collect(report, value_of)
    xs = np.arange(len(labels))
    fig, ax = plt.subplots()
    for method, (means, stds) in series.items():
        if np.all(np.isnan(means)):
            continue
        style = _METHOD_STYLE.get(method, {})
        ax.errorbar(xs, means, yerr=stds, label=method, capsize=3, **style)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_xlabel("specified log sensitivity level")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report_figures(report, output_dir) -> list:
    """Write the regret/certificate panel and the routing panel; returns paths."""
    os.makedirs(output_dir, exist_ok=True)
    written = []
    any_regret = any(r.regret is not None for r in report.rows if r.error is None)
    if any_regret:
        written.append(_draw(
            report, lambda r: r.regret, "policy regret (ground truth)",
            os.path.join(output_dir, "regret_vs_gamma.png"),
        ))
    else:
        written.append(_draw(
            report, lambda r: r.cert_vs_baseline, "worst-case regret certificate",
            os.path.join(output_dir, "certificate_vs_gamma.png"),
        ))
    written.append(_draw(
        report, lambda r: r.frac_human, "fraction routed to humans",
        os.path.join(output_dir, "routing_vs_gamma.png"),
    ))
    return written
