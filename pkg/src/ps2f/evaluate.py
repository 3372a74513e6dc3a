"""Depth maps from reconstructed volumes, depth-map scores and PSF width fits."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, optimize

from . import lobes
from .forward import Volume3D
from .masks import PsfStack

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray
    z_levels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "depth", np.asarray(self.depth, dtype=np.float64))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        object.__setattr__(self, "z_levels", np.asarray(self.z_levels, dtype=np.float64))
        if self.depth.shape != self.valid.shape:
            raise EvaluationError("depth and valid mask shapes differ")


@dataclass(frozen=True)
class ScoreReport:
    mae: float
    rmse: float
    ms_ssim: float
    coverage: float

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return " ".join(f"{k}={v:.6g}" for k, v in self.as_dict().items())


def mip_depth(volume: Volume3D, threshold: float = 0.02) -> DepthMap:
    """Depth of the brightest plane per pixel.

    Pixels whose z-sum falls below ``threshold`` times the largest z-sum
    are invalid. Ties go to the plane nearest focus, then to the smaller z.
    """
    x = volume.values
    z = volume.z_levels
    zsum = x.sum(axis=0)
    top = zsum.max()
    valid = (zsum > 0) & (zsum >= threshold * top) if top > 0 else np.zeros(zsum.shape, dtype=bool)
    # reorder planes by priority so argmax's first-hit rule implements the tie-break
    order = np.lexsort((z, np.abs(z)))
    k = order[np.argmax(x[order], axis=0)]
    depth = np.where(valid, z[k], np.nan)
    return DepthMap(depth, valid, z)


def _ssim_components(a: np.ndarray, b: np.ndarray, sigma: float = 1.5, data_range: float = 1.0):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def blur(img):
        return ndimage.gaussian_filter(img, sigma, mode="reflect", truncate=3.5)

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * sab + c2) / (saa + sbb + c2)
    return float(lum.mean()), float(cs.mean())


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM with Gaussian windows (sigma 1.5) and 2x average pooling.

    Windows are applied with reflective borders so small images still get
    all scales; negative contrast-structure terms are clamped to zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("MS-SSIM inputs differ in shape")
    if min(a.shape) < 2 ** (len(weights) - 1):
        raise EvaluationError(f"image {a.shape} too small for {len(weights)} scales")
    out = 1.0
    for j, wj in enumerate(weights):
        lum, cs = _ssim_components(a, b, data_range=data_range)
        if j == len(weights) - 1:
            out *= max(lum * cs, 0.0) ** wj
        else:
            out *= max(cs, 0.0) ** wj
            a, b = _downsample(a), _downsample(b)
    return float(min(max(out, 0.0), 1.0))


def score(pred: DepthMap, truth: DepthMap) -> ScoreReport:
    """MAE and RMSE over mutually valid pixels, MS-SSIM on normalized maps.

    For MS-SSIM both maps are scaled to [0, 1] over the shared z range;
    pixels missing from the prediction but present in the truth take the
    truth value, and pixels invalid in both are zero.
    """
    if pred.depth.shape != truth.depth.shape:
        raise EvaluationError("depth maps have different shapes")
    both = pred.valid & truth.valid
    if not both.any():
        raise EvaluationError("no pixel is valid in both depth maps")
    err = pred.depth[both] - truth.depth[both]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    zs = np.concatenate([pred.z_levels, truth.z_levels])
    lo, hi = float(zs.min()), float(zs.max())
    span = hi - lo if hi > lo else 1.0
    t = np.where(truth.valid, (truth.depth - lo) / span, 0.0)
    p = np.where(pred.valid, (pred.depth - lo) / span, t)
    return ScoreReport(mae, rmse, ms_ssim(p, t), float(both.sum() / truth.valid.sum()))


def _gauss2d(coords, amp, r0, c0, s1, s2, theta, offset):
    r, c = coords
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (c - c0) + st * (r - r0)
    v = -st * (c - c0) + ct * (r - r0)
    return amp * np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2)) + offset


def fit_gaussian_2d(img: np.ndarray) -> dict:
    """Least-squares rotated 2D Gaussian; sigmas in pixels (NaN on failure)."""
    img = np.asarray(img, dtype=np.float64)
    rr, cc = np.mgrid[0:img.shape[0], 0:img.shape[1]].astype(float)
    total = img.sum()
    nan = {"amp": np.nan, "row": np.nan, "col": np.nan, "sigma1": np.nan, "sigma2": np.nan, "theta": np.nan}
    if not total > 0:
        return nan
    r0, c0 = (rr * img).sum() / total, (cc * img).sum() / total
    s0 = np.sqrt(max(((rr - r0) ** 2 * img).sum() / total, 0.25))
    p0 = (img.max(), r0, c0, s0, s0, 0.0, 0.0)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p, _ = optimize.curve_fit(_gauss2d, (rr.ravel(), cc.ravel()), img.ravel(), p0=p0, maxfev=5000)
    except (RuntimeError, ValueError):
        return nan
    amp, r0, c0, s1, s2, th, _ = p
    return {"amp": amp, "row": r0, "col": c0, "sigma1": abs(s1), "sigma2": abs(s2), "theta": th}


def _window(img: np.ndarray, center, half: int) -> np.ndarray:
    r, c = (int(round(v)) for v in center)
    r0, c0 = max(r - half, 0), max(c - half, 0)
    return img[r0:r + half + 1, c0:c + half + 1]


def lobe_width_report(stack: PsfStack, z: float | None = None, half_window: int = 6) -> dict:
    """2 sigma widths of Gaussian fits to each PSF lobe at one depth.

    ``z`` defaults to the plane closest to focus. Polarized channels hold
    one lobe each; an unpolarized channel is split into its two lobes. The
    width of a lobe is the sum of its two principal sigmas (their mean 2
    sigma), reported in meters.
    """
    zi = int(np.argmin(np.abs(stack.z_samples - (0.0 if z is None else z))))
    widths = []
    for ci, label in enumerate(stack.channels):
        img = stack.psfs[ci, zi]
        if label == "full":
            centers = lobes.lobe_centroids(img)
        else:
            labels, order, _ = lobes.clusters(img, 0.3)
            centers = [ndimage.center_of_mass(img, labels, order[0])] if len(order) else []
        for ctr in centers:
            fit = fit_gaussian_2d(_window(img, ctr, half_window))
            widths.append((fit["sigma1"] + fit["sigma2"]) * stack.pitch)
    widths = np.array(widths)
    return {
        "z": float(stack.z_samples[zi]),
        "two_sigma": widths.tolist(),
        "mean_two_sigma": float(np.nanmean(widths)) if np.isfinite(widths).any() else float("nan"),
    }


def _gauss1d(z, amp, mu, sigma, offset):
    return amp * np.exp(-0.5 * ((z - mu) / sigma) ** 2) + offset


def fit_gaussian_1d(z: np.ndarray, profile: np.ndarray) -> float:
    """Sigma of a least-squares 1D Gaussian fit (NaN on failure)."""
    profile = np.asarray(profile, dtype=np.float64)
    total = profile.sum()
    if not total > 0:
        return float("nan")
    mu = (z * profile).sum() / total
    s0 = np.sqrt(max(((z - mu) ** 2 * profile).sum() / total, (z[1] - z[0]) ** 2 / 4))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p, _ = optimize.curve_fit(_gauss1d, z, profile, p0=(profile.max(), mu, s0, 0.0), maxfev=5000)
    except (RuntimeError, ValueError):
        return float("nan")
    return float(abs(p[2]))


def axial_spread_report(volume: Volume3D, signal_fraction: float = 0.5) -> dict:
    """Median 2 sigma of Gaussian fits along z for the brightest pixel columns."""
    x = volume.values
    z = volume.z_levels
    if len(z) < 4:
        raise EvaluationError("need at least 4 planes to fit an axial profile")
    zsum = x.sum(axis=0)
    rows, cols = np.nonzero(zsum >= signal_fraction * zsum.max()) if zsum.max() > 0 else ((), ())
    sig = np.array([fit_gaussian_1d(z, x[:, r, c]) for r, c in zip(rows, cols)])
    med = float(np.nanmedian(sig)) if np.isfinite(sig).any() else float("nan")
    return {"columns": int(len(sig)), "median_two_sigma": 2 * med}
