"""Heatmap / surface rendering of two-parameter sweep CSVs."""

from pathlib import Path

import numpy as np


def _grid(rows):
    xs = sorted({r[0] for r in rows})
    ys = sorted({r[1] for r in rows})
    Z = np.full((len(ys), len(xs)), np.nan)
    for x, y, z in rows:
        Z[ys.index(y), xs.index(x)] = z
    return xs, ys, Z


def plot_sweep(header, rows, out_dir: Path) -> list[Path]:
    """Heatmap for masking-rate / loss-weight sweeps, contour + surface for
    anchor-count / frequency-split sweeps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    px, py, metric = header
    xs, ys, Z = _grid(rows)
    names = {px, py}
    written = []
    if names & {"M", "num_anchors"} and names & {"k_theta", "k"}:
        X, Y = np.meshgrid(xs, ys)
        fig = plt.figure(figsize=(9, 4))
        ax = fig.add_subplot(1, 2, 1, projection="3d")
        ax.plot_surface(X, Y, Z, cmap="viridis")
        ax.set_xlabel(px), ax.set_ylabel(py), ax.set_zlabel(metric)
        ax2 = fig.add_subplot(1, 2, 2)
        cs = ax2.contourf(X, Y, Z, cmap="viridis") if len(xs) > 1 and len(ys) > 1 else ax2.imshow(Z)
        fig.colorbar(cs, ax=ax2)
        ax2.set_xlabel(px), ax2.set_ylabel(py)
        path = out_dir / f"surface_contour_{px}_{py}.png"
    else:
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(Z, origin="lower", cmap="viridis")
        ax.set_xticks(range(len(xs)), [f"{v:g}" for v in xs])
        ax.set_yticks(range(len(ys)), [f"{v:g}" for v in ys])
        for i in range(len(ys)):
            for j in range(len(xs)):
                ax.text(j, i, f"{Z[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
        ax.set_xlabel(px), ax.set_ylabel(py)
        fig.colorbar(im, ax=ax, label=metric)
        path = out_dir / f"heatmap_{px}_{py}.png"
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written
