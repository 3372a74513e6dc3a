"""Scalar Fourier optics for a 4f relay with a pupil-plane phase element.

Everything here works in SI units (meters, radians). Sample grids are
centered so that the optical axis sits at index ``(height // 2, width // 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import fft, ndimage
from scipy.special import eval_genlaguerre, gammaln, jn_zeros


# first zero of J1 over pi: the Airy dark-ring coefficient (1.2197)
AIRY_ZERO = float(jn_zeros(1, 1)[0] / np.pi)


class OpticsError(ValueError):
    """Raised when optical parameters or sampling are inconsistent."""


@dataclass(frozen=True)
class Grid2D:
    width: int
    height: int
    pitch: float

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise OpticsError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if not self.pitch > 0:
            raise OpticsError(f"grid pitch must be positive, got {self.pitch}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float]:
        return (self.width * self.pitch, self.height * self.pitch)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.width) - self.width // 2) * self.pitch
        y = (np.arange(self.height) - self.height // 2) * self.pitch
        return x, y

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.axes()
        return np.meshgrid(x, y)

    def polar(self) -> tuple[np.ndarray, np.ndarray]:
        xx, yy = self.mesh()
        return np.hypot(xx, yy), np.arctan2(yy, xx)

    @classmethod
    def square(cls, n: int, pitch: float) -> "Grid2D":
        return cls(n, n, pitch)


@dataclass(frozen=True)
class ComplexField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise OpticsError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise OpticsError("field contains non-finite values")

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.intensity)))

    def normalized(self) -> "ComplexField":
        n = self.norm()
        if n == 0:
            raise OpticsError("cannot normalize an all-zero field")
        return ComplexField(self.grid, self.values / n)

    def __mul__(self, other):
        if isinstance(other, ComplexField):
            if other.grid != self.grid:
                raise OpticsError("fields live on different grids")
            other = other.values
        return ComplexField(self.grid, self.values * other)

    __rmul__ = __mul__


@dataclass(frozen=True)
class System4f:
    """Two-lens relay; the pupil (Fourier) plane sits between the lenses."""

    f1: float
    f2: float
    aperture_diameter: float
    wavelength: float

    def __post_init__(self):
        for name in ("f1", "f2", "aperture_diameter", "wavelength"):
            if not getattr(self, name) > 0:
                raise OpticsError(f"{name} must be strictly positive")

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def magnification(self) -> float:
        return self.f2 / self.f1

    def pupil_grid(self, samples: int = 512, span: float = 2.0) -> Grid2D:
        """Square pupil grid covering ``span`` aperture diameters."""
        return Grid2D.square(samples, span * self.aperture_diameter / samples)

    def aperture(self, grid: Grid2D) -> np.ndarray:
        r, _ = grid.polar()
        return r <= self.aperture_diameter / 2

    def airy_radius(self) -> float:
        """First dark ring of the clear-aperture PSF, (j_11 / pi) lambda f / D ~ 1.22 lambda f / D."""
        return AIRY_ZERO * self.wavelength * self.f2 / self.aperture_diameter

    def axial_limit(self) -> float:
        """Diffraction-limited axial scale 4 lambda (f / D)^2."""
        return 4 * self.wavelength * (self.f1 / self.aperture_diameter) ** 2


@dataclass(frozen=True)
class GLBeamSpec:
    """Gauss-Laguerre modes lying on the line n = slope * m + intercept."""

    modes: tuple[tuple[int, int], ...]
    waist: float
    slope: int
    intercept: int

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple((int(n), int(m)) for n, m in self.modes))
        if not self.modes:
            raise OpticsError("beam needs at least one mode")
        if not self.waist > 0:
            raise OpticsError("waist must be positive")
        for n, m in self.modes:
            _check_index(n, m)
            if n != self.slope * m + self.intercept:
                raise OpticsError(
                    f"mode ({n},{m}) is off the line n = {self.slope} m + {self.intercept}"
                )
        ms = sorted(m for _, m in self.modes)
        if ms[0] < 0:
            raise OpticsError("azimuthal indices must be non-negative")
        if len(set(np.diff(ms))) > 1:
            raise OpticsError(f"azimuthal indices {ms} are not an arithmetic progression")


def _check_index(n: int, m: int) -> None:
    if n < 0 or n < abs(m) or (n - abs(m)) % 2:
        raise OpticsError(f"invalid GL index pair (n={n}, m={m}): need n >= |m| and n - |m| even")


def gl_mode(n: int, m: int, waist: float, grid: Grid2D) -> ComplexField:
    """Gauss-Laguerre mode at its waist plane, unit discrete L2 norm.

    Uses the Laguerre-Gaussian form with radial index p = (n - |m|) / 2 and
    azimuthal index l = m.
    """
    _check_index(n, m)
    if not waist > 0:
        raise OpticsError("waist must be positive")
    l = abs(m)
    p = (n - l) // 2
    r, theta = grid.polar()
    s = 2 * r**2 / waist**2
    # log-amplitude keeps high orders finite on wide grids
    with np.errstate(divide="ignore", invalid="ignore"):
        log_amp = 0.5 * l * np.log(s) - s / 2
    log_amp = np.where(s > 0, log_amp, 0.0 if l == 0 else -np.inf)
    log_amp += 0.5 * (gammaln(p + 1) - gammaln(p + l + 1))
    radial = np.exp(log_amp) * eval_genlaguerre(p, l, s)
    values = radial * np.exp(1j * m * theta)
    return ComplexField(grid, values).normalized()


def superpose_beam(spec: GLBeamSpec, grid: Grid2D) -> ComplexField:
    total = np.zeros(grid.shape, dtype=complex)
    for n, m in spec.modes:
        total += gl_mode(n, m, spec.waist, grid).values
    return ComplexField(grid, total).normalized()


def defocus_phase(system: System4f, dz: float, grid: Grid2D) -> ComplexField:
    """Pupil-plane quadratic phase for an object displaced ``dz`` from focus."""
    r, _ = grid.polar()
    phase = system.k / (2 * system.f1) * (dz / system.f1) * r**2
    return ComplexField(grid, np.exp(1j * phase))


def equivalent_rayleigh(system: System4f, waist: float) -> float:
    """Defocus over which a GL-based PSF in the 4f system rotates slope * pi / 4."""
    if not waist > 0:
        raise OpticsError("waist must be positive")
    return system.wavelength * system.f1**2 / (np.pi * waist**2)


def rotation_angle(dz: float, spec: GLBeamSpec, system: System4f, phi0: float = 0.0):
    return phi0 + spec.slope * np.arctan(np.asarray(dz) / equivalent_rayleigh(system, spec.waist))


def natural_pitch(system: System4f, pupil: Grid2D, pad: int = 2) -> float:
    """Image-plane sample spacing of the zero-padded pupil FFT."""
    return system.wavelength * system.f2 / (pad * pupil.width * pupil.pitch)


def _pupil_values(mask) -> tuple[Grid2D, np.ndarray]:
    if isinstance(mask, ComplexField):
        return mask.grid, mask.values
    # duck-typed PhaseMask
    return mask.grid, mask.transmission()


def _fourier_image(values: np.ndarray, grid: Grid2D, system: System4f, dz: float, pad: int):
    if grid.width != grid.height:
        raise OpticsError("pupil grid must be square")
    field = values * system.aperture(grid)
    if dz != 0:
        field = field * defocus_phase(system, dz, grid).values
    size = pad * grid.width
    canvas = np.zeros((size, size), dtype=complex)
    o = (size - grid.width) // 2
    canvas[o:o + grid.width, o:o + grid.width] = field
    return fft.fftshift(fft.fft2(fft.ifftshift(canvas), norm="ortho"))


def _sensor_coords(system: System4f, pupil: Grid2D, sensor: Grid2D, pad: int):
    nat = natural_pitch(system, pupil, pad)
    if sensor.pitch < nat * (1 - 1e-9):
        raise OpticsError(
            f"sensor pitch {sensor.pitch:.4g} m is finer than the pupil sampling supports ({nat:.4g} m)"
        )
    size = pad * pupil.width
    x, y = sensor.axes()
    cols = x / nat + size // 2
    rows = y / nat + size // 2
    if cols.min() < 0 or rows.min() < 0 or cols.max() > size - 1 or rows.max() > size - 1:
        raise OpticsError("sensor field of view exceeds the computed image-plane window")
    return rows, cols, nat


def _crop_resample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r0 = int(np.floor(rows.min()))
    r1 = int(np.ceil(rows.max())) + 1
    c0 = int(np.floor(cols.min()))
    c1 = int(np.ceil(cols.max())) + 1
    sub = img[r0:r1, c0:c1]
    rr, cc = np.meshgrid(rows - r0, cols - c0, indexing="ij")
    return ndimage.map_coordinates(sub, [rr, cc], order=1, mode="nearest")


def image_field(mask, system: System4f, dz: float, sensor_grid: Grid2D, pad: int = 2) -> np.ndarray:
    """Complex image-plane amplitude, bilinearly resampled onto the sensor grid.

    Not normalized; linear in the pupil field.
    """
    grid, values = _pupil_values(mask)
    rows, cols, _ = _sensor_coords(system, grid, sensor_grid, pad)
    f = _fourier_image(values, grid, system, dz, pad)
    return _crop_resample(f.real, rows, cols) + 1j * _crop_resample(f.imag, rows, cols)


def raw_psf(mask, system: System4f, dz: float, sensor_grid: Grid2D, pad: int = 2) -> np.ndarray:
    """Sensor-sampled intensity in units of pupil energy per sensor pixel.

    Summing over an unbounded sensor would return the transmitted pupil energy.
    """
    grid, values = _pupil_values(mask)
    rows, cols, nat = _sensor_coords(system, grid, sensor_grid, pad)
    f = _fourier_image(values, grid, system, dz, pad)
    intensity = f.real**2 + f.imag**2
    return _crop_resample(intensity, rows, cols) * (sensor_grid.pitch / nat) ** 2


def render_psf(mask, system: System4f, dz: float, sensor_grid: Grid2D, pad: int = 2) -> np.ndarray:
    """Unit-sum intensity PSF for a point displaced ``dz`` from focus."""
    psf = raw_psf(mask, system, dz, sensor_grid, pad)
    total = psf.sum()
    if total <= 0:
        raise OpticsError("PSF carries no energy; is the mask opaque?")
    return psf / total


def modal_gram(fields: Sequence[ComplexField]) -> np.ndarray:
    basis = np.stack([f.values.ravel() for f in fields])
    return basis.conj() @ basis.T
