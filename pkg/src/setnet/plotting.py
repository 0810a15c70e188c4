"""PNG figures for experiment reports (Agg backend, no display needed)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software tag or timestamp: reruns write identical files
_META = {"Software": None}

_PROTOCOL_TITLES = {
    "delete_furthest": "deletion (furthest)",
    "delete_random": "deletion (random)",
    "outliers": "outliers",
    "perturb": "perturbation",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curve(curve, path):
    """Total and regularizer loss per step from ``(epoch, batch, lr, task, reg, total)`` rows."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if curve:
        arr = np.array([row[3:] for row in curve], dtype=float)
        steps = np.arange(len(arr))
        ax.plot(steps, arr[:, 2], label="total")
        if np.any(arr[:, 1] > 0):
            ax.plot(steps, arr[:, 1], label="orthogonality")
        ax.set_yscale("log")
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    return _save(fig, path)


def plot_robustness(rows, path):
    protocols = list(dict.fromkeys(r.protocol for r in rows))
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5), sharey=True)
    panels = {"delete_furthest": 0, "delete_random": 0, "outliers": 1, "perturb": 2}
    for protocol in protocols:
        sel = [r for r in rows if r.protocol == protocol]
        ax = axes[panels[protocol]]
        ax.plot([r.severity for r in sel], [r.accuracy for r in sel], marker="o",
                label=_PROTOCOL_TITLES[protocol])
    axes[0].set_xlabel("missing data ratio")
    axes[1].set_xlabel("outlier ratio")
    axes[2].set_xlabel("perturbation std")
    axes[0].set_ylabel("accuracy")
    axes[0].legend()
    for ax in axes:
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ablation(rows, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.barh([r.label for r in rows][::-1], [r.accuracy for r in rows][::-1], color="tab:blue")
    ax.set_xlim(0.0, 1.0)
    ax.set_xlabel("overall accuracy")
    return _save(fig, path)


def plot_bottleneck(cells, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for n in sorted({c.n for c in cells}):
        sel = sorted((c for c in cells if c.n == n), key=lambda c: c.k)
        ax.plot([c.k for c in sel], [c.accuracy for c in sel], marker="o", label=f"{n} points")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("bottleneck size")
    ax.set_ylabel("accuracy")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
