"""PNG figures for human inspection: PSF galleries, CRLB heat maps, depth maps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import DepthMap  # noqa: E402
from .fisher import CrlbMap  # noqa: E402
from .masks import PsfStack  # noqa: E402


def psf_gallery(stack: PsfStack, path, n_planes: int = 8) -> None:
    """Grayscale grid: one row per channel, ``n_planes`` evenly spaced depths."""
    idx = np.unique(np.linspace(0, len(stack.z_samples) - 1, min(n_planes, len(stack.z_samples))).round().astype(int))
    nc = len(stack.channels)
    fig, axes = plt.subplots(nc, len(idx), figsize=(1.6 * len(idx), 1.7 * nc), squeeze=False)
    for ci in range(nc):
        for j, zi in enumerate(idx):
            ax = axes[ci, j]
            ax.imshow(stack.psfs[ci, zi], cmap="gray", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if ci == 0:
                ax.set_title(f"{stack.z_samples[zi] * 1e3:+.2f} mm", fontsize=8)
        axes[ci, 0].set_ylabel(stack.channels[ci], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def crlb_heatmap(cm: CrlbMap, path) -> None:
    """log10 of the depth bound (micrometers) over the (phi, z) grid."""
    with np.errstate(divide="ignore", invalid="ignore"):
        img = np.log10(cm.sqrt_crlb_z * 1e6)
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    extent = [np.degrees(cm.phi_grid[0]), np.degrees(cm.phi_grid[-1]), cm.z_grid[0] * 1e3, cm.z_grid[-1] * 1e3]
    im = ax.imshow(img, origin="lower", aspect="auto", cmap="viridis", extent=extent)
    ax.set_xlabel("line angle (deg)")
    ax.set_ylabel("z (mm)")
    ax.set_title(f"log10 sqrt CRLB_z [um] {cm.psf_label}".strip(), fontsize=9)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def depth_map_figure(dm: DepthMap, path, truth: DepthMap | None = None) -> None:
    """False-color depth in mm; invalid pixels are left blank."""
    maps = [("estimate", dm)] + ([("truth", truth)] if truth is not None else [])
    lo, hi = dm.z_levels.min() * 1e3, dm.z_levels.max() * 1e3
    fig, axes = plt.subplots(1, len(maps), figsize=(3.8 * len(maps), 3.4), squeeze=False)
    for ax, (name, m) in zip(axes[0], maps):
        im = ax.imshow(np.where(m.valid, m.depth * 1e3, np.nan), cmap="turbo", vmin=lo, vmax=hi)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0].tolist(), label="z (mm)")
    fig.savefig(path, dpi=100)
    plt.close(fig)
