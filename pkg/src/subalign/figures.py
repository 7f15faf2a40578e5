"""Figure rendering for benchmark reports.

Renders PNG summaries next to the delimited outputs: a metric bar chart with
spread whiskers, per-method training curves, and a 2-D projection of emitted
embeddings. All rendering targets files (headless backend).
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def metric_bars(aggregates, path, metric=None):
    """Bar chart of one metric's per-method mean with std whiskers."""
    if metric is None:
        names = {a["metric"] for a in aggregates}
        metric = "auc" if "auc" in names else (sorted(names)[0] if names else None)
    picked = [a for a in aggregates if a["metric"] == metric]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(picked)), 3.2))
    if picked:
        xs = np.arange(len(picked))
        ax.bar(xs, [a["mean"] for a in picked], yerr=[a["std"] for a in picked],
               capsize=3, color="#4878a8")
        ax.set_xticks(xs)
        ax.set_xticklabels([a["method"] for a in picked], rotation=30, ha="right",
                           fontsize=8)
        ax.set_ylabel(metric)
    ax.set_title("benchmark %s by method" % (metric or "metric"))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(rows, path):
    """Training-objective curve of each method's first successful run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    seen = set()
    for row in rows:
        if row["status"] != "ok" or row["method"] in seen or "curve" not in row:
            continue
        seen.add(row["method"])
        curve = row["curve"]
        ax.plot([c["epoch"] for c in curve], [c["total"] for c in curve],
                label="%s (seed %d)" % (row["method"], row["seed"]), linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training objective")
    if seen:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def embedding_scatter(embedding_csv, path):
    """2-D principal-component view of an emitted embedding file."""
    labels = []
    coords = []
    with open(embedding_csv) as fh:
        header = fh.readline()
        n_z = header.strip().count("z_")
        for line in fh:
            parts = line.strip().split(",")
            labels.append(parts[1])
            coords.append([float(v) for v in parts[3 : 3 + n_z]])
    z = np.asarray(coords, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.2, 3.8))
    if z.shape[0]:
        centered = z - z.mean(axis=0)
        if z.shape[1] > 2:
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            pts = centered @ vt[:2].T
        elif z.shape[1] == 2:
            pts = centered
        else:
            pts = np.column_stack([centered[:, 0], np.zeros(z.shape[0])])
        labs = np.array(labels)
        mask0 = labs == "0"
        mask1 = labs == "1"
        for mask, color, name in ((mask0, "#d1615d", "label 0"),
                                  (mask1, "#5f9e6e", "label 1")):
            if mask.any():
                ax.scatter(pts[mask, 0], pts[mask, 1], s=8, alpha=0.6, color=color,
                           label=name)
        other = ~(mask0 | mask1)
        if other.any():
            ax.scatter(pts[other, 0], pts[other, 1], s=8, alpha=0.4, color="#777777",
                       label="other")
        ax.legend(fontsize=7)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title("embedding projection")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(config, rows, aggregates, out_dir):
    """All report figures for one experiment run."""
    produced = [metric_bars(aggregates, os.path.join(out_dir, "metrics.png"))]
    produced.append(loss_curves(rows, os.path.join(out_dir, "loss_curves.png")))
    for row in rows:
        if row["status"] != "ok":
            continue
        name = "%s_seed%d_target_test.csv" % (row["method"].replace(":", "_"), row["seed"])
        csv_path = os.path.join(out_dir, "embeddings", name)
        if os.path.exists(csv_path):
            produced.append(embedding_scatter(
                csv_path, os.path.join(out_dir, "embeddings_%s_seed%d.png" % (
                    row["method"].replace(":", "_"), row["seed"]))))
            break
    return produced
