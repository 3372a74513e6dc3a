"""Measurements on rendered PSF images: lobe clusters, centroids, angles."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def clusters(img: np.ndarray, frac: float = 0.2):
    """Connected bright regions above ``frac`` of the peak, strongest first.

    Returns ``(labels, order, energies)`` where ``order`` lists label ids
    sorted by descending integrated intensity.
    """
    img = np.asarray(img, dtype=float)
    labels, n = ndimage.label(img > frac * img.max(), structure=_EIGHT)
    if n == 0:
        return labels, np.array([], dtype=int), np.array([])
    energies = np.asarray(ndimage.sum(img, labels, index=np.arange(1, n + 1)))
    order = np.argsort(energies)[::-1]
    return labels, order + 1, energies[order]


def dominance_ratio(img: np.ndarray, frac: float = 0.2) -> float:
    """Energy of the largest cluster over the runner-up (inf for a single cluster)."""
    _, _, e = clusters(img, frac)
    if len(e) < 2 or e[1] == 0:
        return np.inf
    return float(e[0] / e[1])


def _center(img: np.ndarray) -> tuple[float, float]:
    h, w = img.shape
    return h // 2, w // 2


def lobe_centroids(img: np.ndarray, frac: float = 0.3) -> np.ndarray:
    """Intensity centroids (row, col) of the two strongest lobes.

    Bright pixels are split into two clusters by the line through their
    intensity centroid perpendicular to their principal axis.
    """
    img = np.asarray(img, dtype=float)
    mask = img > frac * img.max()
    rows, cols = np.nonzero(mask)
    w = img[rows, cols]
    pts = np.stack([rows, cols], axis=1).astype(float)
    mean = (pts * w[:, None]).sum(0) / w.sum()
    d = pts - mean
    cov = (d * w[:, None]).T @ d / w.sum()
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]
    side = d @ axis >= 0
    out = []
    for sel in (side, ~side):
        if not sel.any():
            out.append(mean)
        else:
            out.append((pts[sel] * w[sel, None]).sum(0) / w[sel].sum())
    return np.array(out)


def lobe_axis_angle(img: np.ndarray, frac: float = 0.3) -> float:
    """Orientation of the line joining the two lobes, in [0, pi).

    Angles follow ``atan2(y, x)`` with y increasing along rows.
    """
    a, b = lobe_centroids(img, frac)
    dy, dx = a - b
    return float(np.arctan2(dy, dx) % np.pi)


def single_lobe_angle(img: np.ndarray, frac: float = 0.3) -> float:
    """Azimuth of the dominant lobe about the optical axis, in [0, 2 pi)."""
    labels, order, _ = clusters(img, frac)
    r, c = ndimage.center_of_mass(np.asarray(img, dtype=float), labels, order[0])
    r0, c0 = _center(img)
    return float(np.arctan2(r - r0, c - c0) % (2 * np.pi))


def unwrap_axis(angles) -> np.ndarray:
    """Unwrap a sequence of pi-periodic axis angles into a continuous curve."""
    return np.unwrap(2 * np.asarray(angles)) / 2
