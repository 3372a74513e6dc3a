"""Fisher information and Cramer-Rao bounds for point sources and line patches.

For a Poisson image with expected counts ``mu`` on top of a background
``beta`` the information about parameters ``theta`` is

    FI_ij = sum_k (d mu_k / d theta_i)(d mu_k / d theta_j) / (mu_k + beta)

with the partial derivatives taken by central finite differences on the
(linearly interpolated) PSF stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .masks import POLARIZER_TRANSMISSION, PsfStack
from .optics import OpticsError

SINGULAR_CONDITION = 1e12


@dataclass(frozen=True)
class PhotonModel:
    signal_photons: float = 100_000.0
    background: float = 5.0

    def __post_init__(self):
        if not self.signal_photons > 0:
            raise ValueError("signal photon count must be positive")
        if self.background < 0:
            raise ValueError("background must be non-negative")

    def scaled(self, fraction: float) -> "PhotonModel":
        return PhotonModel(self.signal_photons * fraction, self.background)


@dataclass(frozen=True)
class LinePatch:
    z: float
    phi: float
    patch_size: int = 64
    line_width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "phi", float(self.phi) % np.pi)
        if self.patch_size < 16:
            raise ValueError("patch must be at least 16 pixels")
        if not self.line_width > 0:
            raise ValueError("line width must be positive")


@dataclass(frozen=True)
class FisherMatrix:
    entries: np.ndarray
    params: tuple[str, ...]

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        object.__setattr__(self, "entries", a)
        if a.shape != (len(self.params),) * 2:
            raise ValueError("Fisher matrix shape does not match parameter list")

    @property
    def dim(self) -> int:
        return len(self.params)

    def __add__(self, other: "FisherMatrix") -> "FisherMatrix":
        if other.params != self.params:
            raise ValueError("cannot add Fisher matrices over different parameters")
        return FisherMatrix(self.entries + other.entries, self.params)

    def __mul__(self, k: float) -> "FisherMatrix":
        return FisherMatrix(self.entries * k, self.params)

    __rmul__ = __mul__


@dataclass
class CrlbMap:
    z_grid: np.ndarray
    phi_grid: np.ndarray
    sqrt_crlb_z: np.ndarray
    sqrt_crlb_phi: np.ndarray
    photon_model: PhotonModel
    psf_label: str = ""
    settings: dict = field(default_factory=dict)

    @property
    def stats(self) -> dict:
        z = self.sqrt_crlb_z
        return {
            "mean_sqrt_crlb_z": float(np.nanmean(z)) if np.isfinite(z).any() else float("nan"),
            "std_sqrt_crlb_z": float(np.nanstd(z)) if np.isfinite(z).any() else float("nan"),
            "mean_sqrt_crlb_phi": float(np.nanmean(self.sqrt_crlb_phi))
            if np.isfinite(self.sqrt_crlb_phi).any()
            else float("nan"),
            "phi_peaks": count_phi_peaks(z),
        }


def _line_canvas(size: int, phi: float, width: float) -> np.ndarray:
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    d = np.abs(-np.sin(phi) * (xx - c) + np.cos(phi) * (yy - c))
    return np.clip(1 - d / width, 0, None)


def convolve_same(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Linear convolution cropped so the kernel's center sample maps to identity.

    The kernel center is taken at ``(kh // 2, kw // 2)``, matching the grid
    convention used for PSFs.
    """
    full = signal.fftconvolve(img, kernel, mode="full")
    kh, kw = kernel.shape
    h, w = img.shape
    return full[kh // 2:kh // 2 + h, kw // 2:kw // 2 + w]


def _line_signal(psf: np.ndarray, patch: LinePatch, phi: float, photons: float) -> np.ndarray:
    margin = max(psf.shape) // 2 + 1
    canvas = _line_canvas(patch.patch_size + 2 * margin, phi, patch.line_width)
    img = convolve_same(canvas, psf)[margin:margin + patch.patch_size, margin:margin + patch.patch_size]
    img = np.clip(img, 0, None)
    total = img.sum()
    if total <= 0:
        raise OpticsError("line image carries no signal")
    return photons * img / total


def render_line_image(stack: PsfStack, patch: LinePatch, model: PhotonModel, channel: int = 0) -> np.ndarray:
    """Expected photon counts for a straight line through the patch center.

    The line signal totals ``model.signal_photons``; the background adds
    ``model.background`` to every pixel.
    """
    psf = stack.interpolate(patch.z, channel)
    return _line_signal(psf, patch, patch.phi, model.signal_photons) + model.background


def fisher_from_derivatives(mu: np.ndarray, derivs: Sequence[np.ndarray], background: float, params) -> FisherMatrix:
    d = np.stack([np.ravel(g) for g in derivs])
    den = np.ravel(mu) + background
    # pixels with no expected signal or background carry no information
    w = np.divide(1.0, den, out=np.zeros_like(den, dtype=float), where=den > 0)
    return FisherMatrix((d * w) @ d.T, tuple(params))


def _channels(stacks) -> list[tuple[PsfStack, int]]:
    if isinstance(stacks, PsfStack):
        stacks = [stacks]
    return [(s, i) for s in stacks for i in range(len(s.channels))]


def default_fractions(n_channels: int) -> list[float]:
    """Per-channel share of the photon budget.

    A lone channel gets everything; a polarized set splits the half that
    survives the polarizers evenly.
    """
    if n_channels == 1:
        return [1.0]
    return [POLARIZER_TRANSMISSION / n_channels] * n_channels


def _default_steps(stack: PsfStack) -> tuple[float, float]:
    dz = stack.z_spacing / 4 if len(stack.z_samples) > 1 else 1e-6
    return dz, np.radians(0.5)


def fisher_line(stacks, patch: LinePatch, model: PhotonModel, step=None, photon_fractions=None) -> FisherMatrix:
    """2x2 information over (z, phi), summed over every channel of ``stacks``."""
    chans = _channels(stacks)
    fracs = default_fractions(len(chans)) if photon_fractions is None else list(photon_fractions)
    if len(fracs) != len(chans):
        raise ValueError("need one photon fraction per channel")
    dz, dphi = step if step is not None else _default_steps(chans[0][0])
    total = FisherMatrix(np.zeros((2, 2)), ("z", "phi"))
    for (stack, ci), frac in zip(chans, fracs):
        zs = stack.z_samples
        if patch.z - dz < zs[0] - 1e-12 or patch.z + dz > zs[-1] + 1e-12:
            raise OpticsError(f"z={patch.z:.4g} is too close to the stack boundary for step {dz:.3g}")
        n = model.signal_photons * frac
        h0 = stack.interpolate(patch.z, ci)
        mu = _line_signal(h0, patch, patch.phi, n)
        d_z = (
            _line_signal(stack.interpolate(patch.z + dz, ci), patch, patch.phi, n)
            - _line_signal(stack.interpolate(patch.z - dz, ci), patch, patch.phi, n)
        ) / (2 * dz)
        d_phi = (
            _line_signal(h0, patch, patch.phi + dphi, n) - _line_signal(h0, patch, patch.phi - dphi, n)
        ) / (2 * dphi)
        total = total + fisher_from_derivatives(mu, [d_z, d_phi], model.background, ("z", "phi"))
    return total


def _shifted(psf: np.ndarray, dy: float, dx: float) -> np.ndarray:
    spec = ndimage.fourier_shift(np.fft.fft2(psf), (dy, dx))
    return np.real(np.fft.ifft2(spec))


def fisher_point(stack: PsfStack, position, model: PhotonModel, step=None, channel: int = 0) -> FisherMatrix:
    """3x3 information over (x, y, z) for a point emitter imaged by one channel.

    ``position`` is ``(x, y, z)`` in meters, lateral offsets relative to the
    PSF center. The image is normalized to ``model.signal_photons``.
    """
    x, y, z = position
    pitch = stack.pitch
    if step is None:
        step = (0.05 * pitch, 0.05 * pitch, _default_steps(stack)[0])
    sx, sy, sz = step
    zs = stack.z_samples
    if z - sz < zs[0] - 1e-12 or z + sz > zs[-1] + 1e-12:
        raise OpticsError(f"z={z:.4g} is too close to the stack boundary for step {sz:.3g}")

    def image(xx, yy, zz):
        h = stack.interpolate(zz, channel)
        h = _shifted(h, yy / pitch, xx / pitch)
        s = h.sum()
        return model.signal_photons * h / s if s > 0 else h

    mu = image(x, y, z)
    derivs = [
        (image(x + sx, y, z) - image(x - sx, y, z)) / (2 * sx),
        (image(x, y + sy, z) - image(x, y - sy, z)) / (2 * sy),
        (image(x, y, z + sz) - image(x, y, z - sz)) / (2 * sz),
    ]
    return fisher_from_derivatives(np.clip(mu, 0, None), derivs, model.background, ("x", "y", "z"))


def crlb_extract(fi: FisherMatrix) -> np.ndarray:
    """Square roots of the diagonal of the inverse information matrix.

    Parameters carrying no information at all come back as NaN while the
    rest are bounded from the informative sub-block; any other singular
    matrix yields all NaN.
    """
    a = fi.entries
    out = np.full(fi.dim, np.nan)
    keep = np.abs(np.diag(a)) > 0
    if not keep.any():
        return out
    if not np.allclose(a[np.ix_(keep, ~keep)], 0):
        return out
    sub = a[np.ix_(keep, keep)]
    if np.linalg.cond(sub) > SINGULAR_CONDITION:
        return out
    diag = np.diag(np.linalg.inv(sub))
    with np.errstate(invalid="ignore"):
        out[keep] = np.where(diag > 0, np.sqrt(diag), np.nan)
    return out


def count_phi_peaks(values: np.ndarray, min_prominence: float = 0.1) -> int:
    """Number of local maxima along phi (axis 1, circular) summed over z rows.

    Prominence is measured in decades of the values, matching log-scale maps.
    Rows containing NaN are skipped.
    """
    total = 0
    for row in np.atleast_2d(values):
        if not np.all(np.isfinite(row)) or np.any(row <= 0):
            continue
        lr = np.log10(row)
        n = len(lr)
        tiled = np.concatenate([lr, lr, lr])
        peaks, _ = signal.find_peaks(tiled, prominence=min_prominence)
        total += int(np.sum((peaks >= n) & (peaks < 2 * n)))
    return total


def crlb_map(
    stacks,
    z_grid,
    phi_grid,
    model: PhotonModel,
    step=None,
    patch_size: int = 64,
    line_width: float = 1.0,
    photon_fractions=None,
    label: str = "",
) -> CrlbMap:
    z_grid = np.asarray(z_grid, dtype=float)
    phi_grid = np.asarray(phi_grid, dtype=float)
    if z_grid.size == 0 or phi_grid.size == 0:
        raise ValueError("grids must be non-empty")
    sz = np.full((z_grid.size, phi_grid.size), np.nan)
    sp = np.full_like(sz, np.nan)
    for i, z in enumerate(z_grid):
        for j, phi in enumerate(phi_grid):
            fi = fisher_line(stacks, LinePatch(z, phi, patch_size, line_width), model, step, photon_fractions)
            sz[i, j], sp[i, j] = crlb_extract(fi)
    settings = {"patch_size": patch_size, "line_width": line_width}
    if step is not None:
        settings["step"] = list(step)
    if photon_fractions is not None:
        settings["photon_fractions"] = list(photon_fractions)
    return CrlbMap(z_grid, phi_grid, sz, sp, model, label, settings)
