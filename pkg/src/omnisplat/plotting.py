"""Report figures written next to the CSV outputs of the command line."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training(rows, path):
    """Loss (log scale) and Gaussian count against iteration."""
    it = np.array([r.iteration for r in rows])
    loss = np.array([r.loss for r in rows])
    count = np.array([r.n_gaussians for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.semilogy(it, loss, color="#1f4e79", lw=1.2, label="loss")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(it, count, color="#c55a11", lw=1.0, ls="--", label="Gaussians")
        ax2.set_ylabel("Gaussians")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right", frameon=False)
        return _save(fig, path)


def plot_eval(names, psnr, ssim, path):
    """Per-view PSNR and SSIM bars."""
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 3), sharex=True)
        a.bar(x, psnr, color="#1f4e79")
        a.set_ylabel("PSNR (dB)")
        b.bar(x, ssim, color="#548235")
        b.set_ylabel("SSIM")
        b.set_ylim(min(0.0, float(np.min(ssim, initial=0.0))), 1.0)
        for ax in (a, b):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        return _save(fig, path)


def plot_gradcheck(worst_by_group: dict, tolerance, path):
    """Worst relative error per parameter group against the tolerance."""
    names = list(worst_by_group)
    err = np.maximum([worst_by_group[n] for n in names], 1e-17)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        colors = ["#548235" if e < tolerance else "#c00000" for e in err]
        ax.bar(names, err, color=colors)
        ax.axhline(tolerance, color="k", lw=0.8, ls=":")
        ax.set_yscale("log")
        ax.set_ylabel("max relative error")
        return _save(fig, path)
