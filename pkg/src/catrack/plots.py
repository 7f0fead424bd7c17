"""Precision and success plots rendered to files with matplotlib."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PR_THRESHOLDS, SR_THRESHOLDS, pr_at, sr_auc  # noqa: E402

plt.rcParams["figure.figsize"] = (4.5, 3.5)
plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["font.size"] = 9
plt.rcParams["svg.hashsalt"] = "catrack"  # stable element ids between runs


def _curve_plot(path, series, xs, xlabel, ylabel, title):
    fig, ax = plt.subplots()
    for label, ys in series:
        ax.plot(xs, ys, lw=1.5, label=label)
    ax.set_xlim(xs[0], xs[-1])
    ax.set_ylim(0, 1.02)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if series:
        ax.legend(loc="lower right" if xs[-1] > 1 else "lower left", fontsize=8, frameon=False)
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)
    return path


def plot_curves(curves, out_dir, fmt="svg"):
    """``curves = {variant: (pr_curve, sr_curve)}`` -> pr.<fmt> and sr.<fmt>."""
    ranked_pr = sorted(curves.items(), key=lambda kv: -pr_at(kv[1][0], 20))
    ranked_sr = sorted(curves.items(), key=lambda kv: -sr_auc(kv[1][1]))
    pr_series = [(f"{v} [{pr_at(c[0], 20):.3f}]", c[0]) for v, c in ranked_pr]
    sr_series = [(f"{v} [{sr_auc(c[1]):.3f}]", c[1]) for v, c in ranked_sr]
    pr = _curve_plot(f"{out_dir}/pr.{fmt}", pr_series, PR_THRESHOLDS,
                     "location error threshold (px)", "precision", "Precision plot")
    sr = _curve_plot(f"{out_dir}/sr.{fmt}", sr_series, SR_THRESHOLDS,
                     "overlap threshold", "success rate", "Success plot")
    return pr, sr
