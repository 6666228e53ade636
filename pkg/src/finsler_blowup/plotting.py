"""SVG figures for the command-line reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1.0) / 2.0
width = 4.5

params = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 2,
    "figure.figsize": [width, width * golden],
    "svg.hashsalt": "finsler-blowup",
    "svg.fonttype": "none",
}


def _save(fig, path):
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def norm_shapes(spec, path):
    from .norms import eval_H, eval_polar

    t = np.linspace(0, 2 * np.pi, 721)
    e = np.stack([np.cos(t), np.sin(t)], axis=-1)
    ball = e / eval_H(spec, e)[:, None]
    wulff = e / eval_polar(spec, e, tabulated=not spec.closed_form)[:, None]
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(width * golden, width * golden))
        ax.plot(ball[:, 0], ball[:, 1], label=r"$H=1$")
        ax.plot(wulff[:, 0], wulff[:, 1], "--", label=r"$H^\circ=1$")
        ax.set_aspect("equal")
        ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def heat_map(grid, values, path, label):
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        x, y = grid.x, grid.y
        im = ax.pcolormesh(x, y, values, shading="nearest", cmap="viridis")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_aspect("equal")
        ax.set_xlabel("$x$")
        ax.set_ylabel("$y$")
        fig.tight_layout()
        _save(fig, path)


def loglog_profile(d, u, theory, path, log_mode=False):
    """Nodal values against d_H with the predicted leading term overlaid."""
    order = np.argsort(d)
    d, u = d[order], u[order]
    dd = np.geomspace(d.min(), d.max(), 200)
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(d, u, ".", alpha=0.4, label="solution")
        if log_mode:
            ax.plot(dd, theory["C0"] * np.log(1.0 / dd), "-", label=r"$C_0\log(1/d_H)$")
            ax.set_xscale("log")
        else:
            ax.plot(dd, theory["C0"] * dd ** (-theory["alpha"]), "-", label=r"$C_0 d_H^{-\alpha}$")
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(r"$d_H$")
        ax.set_ylabel(r"$u$")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def trace_plot(trace, u0, path, oracle=None):
    lam = np.array([a for a, _ in trace])
    val = np.array([b for _, b in trace])
    with plt.rc_context(params):
        fig, ax = plt.subplots()
        ax.semilogx(lam, val, "o-", label=r"$\lambda u_\lambda(x_0)$")
        ax.axhline(u0, color="k", lw=0.8, label=r"extrapolated $u_0$")
        if oracle is not None:
            ax.axhline(oracle, color="C3", ls=":", label="oracle")
        ax.set_xlabel(r"$\lambda$")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
