"""Phase-only rotating-PSF masks, their polarized half-aperture split, and PSF stacks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import lobes
from .optics import (
    ComplexField,
    GLBeamSpec,
    Grid2D,
    OpticsError,
    System4f,
    gl_mode,
    raw_psf,
    superpose_beam,
)

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
POLARIZER_TRANSMISSION = 0.5


def _wrap_phase(phase) -> np.ndarray:
    p = np.mod(np.asarray(phase, dtype=np.float64), TWO_PI).astype(np.float32)
    # float32 rounding can land exactly on 2 pi
    p[p >= np.float32(TWO_PI)] = 0
    return p


@dataclass(frozen=True)
class PhaseMask:
    """Phase-only pupil element; samples outside ``diameter`` are opaque."""

    grid: Grid2D
    phase: np.ndarray
    diameter: float
    quantization_levels: int | None = None
    diagnostics: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        phase = np.asarray(self.phase, dtype=np.float32)
        object.__setattr__(self, "phase", phase)
        if phase.shape != self.grid.shape:
            raise OpticsError(f"phase shape {phase.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(phase)) or phase.min() < 0 or phase.max() >= np.float32(TWO_PI):
            raise OpticsError("mask phase must lie in [0, 2 pi)")
        if not self.diameter > 0:
            raise OpticsError("mask diameter must be positive")
        if self.quantization_levels is not None:
            L = self.quantization_levels
            if L < 2:
                raise OpticsError("quantization needs at least 2 levels")
            k = phase[self.support()] / (TWO_PI / L)
            if np.max(np.abs(k - np.round(k)), initial=0) > 1e-4:
                raise OpticsError(f"phase is not quantized to {L} levels")

    @classmethod
    def from_phase(cls, grid: Grid2D, phase, diameter: float, **kw) -> "PhaseMask":
        """Build a mask from arbitrary real phase, wrapping into [0, 2 pi)."""
        return cls(grid, _wrap_phase(phase), diameter, **kw)

    def support(self) -> np.ndarray:
        r, _ = self.grid.polar()
        return r <= self.diameter / 2

    def transmission(self) -> np.ndarray:
        return np.where(self.support(), np.exp(1j * self.phase.astype(np.float64)), 0)

    def field(self) -> ComplexField:
        return ComplexField(self.grid, self.transmission())


@dataclass(frozen=True)
class PolarizedMaskAssembly:
    """Mask split by a line through its center, each half behind its own polarizer.

    ``partition_axis_angle`` is the orientation of the dividing line. Half A
    holds points on the positive side of the line's normal (and the line
    itself); half B is the rest.
    """

    mask: PhaseMask
    partition_axis_angle: float
    channel_of_half: dict = field(default_factory=lambda: {"A": "0", "B": "90"})

    def __post_init__(self):
        if set(self.channel_of_half) != {"A", "B"}:
            raise OpticsError("assembly needs exactly halves A and B")
        a, b = (_polarizer_angle(self.channel_of_half[h]) for h in ("A", "B"))
        if abs(abs(a - b) % 180 - 90) > 1e-9:
            raise OpticsError("half-aperture polarizers must be orthogonal")

    def half(self, which: str) -> np.ndarray:
        xx, yy = self.mask.grid.mesh()
        t = self.partition_axis_angle
        side = -np.sin(t) * xx + np.cos(t) * yy >= 0
        return side if which == "A" else ~side

    def half_field(self, which: str) -> ComplexField:
        return ComplexField(self.mask.grid, self.mask.transmission() * self.half(which))


def _polarizer_angle(label: str) -> float:
    return float(label)


@dataclass(frozen=True)
class PsfStack:
    """Per-channel, per-depth intensity PSFs indexed ``psfs[channel, z, y, x]``."""

    z_samples: np.ndarray
    channels: tuple[str, ...]
    psfs: np.ndarray
    pitch: float

    def __post_init__(self):
        z = np.asarray(self.z_samples, dtype=np.float64)
        object.__setattr__(self, "z_samples", z)
        object.__setattr__(self, "channels", tuple(str(c) for c in self.channels))
        if z.ndim != 1 or len(z) == 0:
            raise OpticsError("stack needs at least one z sample")
        if np.any(np.diff(z) <= 0):
            raise OpticsError("z samples must be strictly increasing")
        if self.psfs.ndim != 4 or self.psfs.shape[:2] != (len(self.channels), len(z)):
            raise OpticsError(f"psf array shape {self.psfs.shape} does not match channels x z")
        if np.any(self.psfs < 0):
            raise OpticsError("PSFs must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.psfs.shape[2:]

    @property
    def z_spacing(self) -> float:
        return float(np.median(np.diff(self.z_samples))) if len(self.z_samples) > 1 else 0.0

    def index(self, label: str) -> int:
        return self.channels.index(str(label))

    def channel(self, label: str) -> "PsfStack":
        i = self.index(label)
        return PsfStack(self.z_samples, (self.channels[i],), self.psfs[i:i + 1], self.pitch)

    def select(self, labels: Sequence[str]) -> "PsfStack":
        idx = [self.index(l) for l in labels]
        return PsfStack(self.z_samples, tuple(self.channels[i] for i in idx), self.psfs[idx], self.pitch)

    def plane_energy(self) -> np.ndarray:
        return self.psfs.sum(axis=(2, 3))

    def interpolate(self, z: float, channel: int = 0) -> np.ndarray:
        """PSF at depth ``z`` by linear interpolation between neighbouring planes."""
        zs = self.z_samples
        if not zs[0] - 1e-12 <= z <= zs[-1] + 1e-12:
            raise OpticsError(f"z={z:.4g} m is outside the stack range [{zs[0]:.4g}, {zs[-1]:.4g}]")
        if len(zs) == 1:
            return self.psfs[channel, 0]
        i = int(np.clip(np.searchsorted(zs, z) - 1, 0, len(zs) - 2))
        t = (z - zs[i]) / (zs[i + 1] - zs[i])
        t = min(max(t, 0.0), 1.0)
        return (1 - t) * self.psfs[channel, i] + t * self.psfs[channel, i + 1]


@dataclass(frozen=True)
class GSConfig:
    """Settings for the modal-constrained Gerchberg-Saxton loop.

    ``weight_band`` bounds each modal magnitude to ``[mean / band, mean * band]``
    after projection; 1 keeps the equal-weight superposition.
    """

    iterations: int = 200
    modal_projection: bool = True
    convergence_tol: float = 1e-5
    weight_band: float = 1.0

    def __post_init__(self):
        if self.iterations < 1:
            raise OpticsError("GS needs at least one iteration")
        if self.weight_band < 1:
            raise OpticsError("weight_band must be >= 1")


def design_dhpsf_mask(spec: GLBeamSpec, system: System4f, grid: Grid2D, cfg: GSConfig = GSConfig()) -> PhaseMask:
    """Phase-only mask whose PSF carries the rotating GL superposition.

    Starts from the phase of the equal-weight superposed beam, then alternates
    a unit-amplitude constraint in the pupil with a projection onto the span
    of the requested GL modes. The best iterate (highest fraction of pupil
    energy inside the modal span) is returned; its record lives in
    ``mask.diagnostics``.
    """
    if max(grid.extent) < system.aperture_diameter:
        raise OpticsError("pupil grid does not cover the aperture")
    aperture = system.aperture(grid)
    basis = np.stack([gl_mode(n, m, spec.waist, grid).values.ravel() for n, m in spec.modes])
    gram = basis.conj() @ basis.T

    def project(u):
        c = np.linalg.solve(gram, basis.conj() @ u.ravel())
        return c

    u = np.where(aperture, np.exp(1j * np.angle(superpose_beam(spec, grid).values)), 0)
    energy = np.sum(np.abs(u) ** 2)
    history = []
    best_u, best_frac = u, -np.inf
    converged = False
    for it in range(cfg.iterations):
        c = project(u)
        frac = float(np.real(np.vdot(c, gram @ c)) / energy)
        history.append(frac)
        if frac > best_frac:
            best_u, best_frac = u, frac
        if it and abs(frac - history[-2]) <= cfg.convergence_tol * abs(frac):
            converged = True
            break
        if not cfg.modal_projection:
            break
        mag = np.abs(c)
        mean = mag.mean()
        c = np.exp(1j * np.angle(c)) * np.clip(mag, mean / cfg.weight_band, mean * cfg.weight_band)
        target = (c @ basis).reshape(grid.shape)
        u = np.where(aperture, np.exp(1j * np.angle(target)), 0)
    log.debug("GS stopped after %d iterations, modal fraction %.4f", len(history), best_frac)
    diagnostics = {
        "modal_energy_fraction": best_frac,
        "history": history,
        "iterations": len(history),
        "converged": converged,
        "initialization": "superposed-beam phase",
        "weight_band": cfg.weight_band,
    }
    return PhaseMask.from_phase(
        grid, np.where(aperture, np.angle(best_u), 0.0), system.aperture_diameter, diagnostics=diagnostics
    )


def partition_mask(mask: PhaseMask, axis_angle: float) -> PolarizedMaskAssembly:
    return PolarizedMaskAssembly(mask, float(axis_angle) % np.pi)


def perpendicular_partition_axis(mask: PhaseMask, system: System4f, sensor_grid: Grid2D) -> float:
    """Dividing line perpendicular to the in-focus lobe axis."""
    return float((lobes.lobe_axis_angle(raw_psf(mask, system, 0.0, sensor_grid)) + np.pi / 2) % np.pi)


def find_partition_axis(
    mask: PhaseMask,
    system: System4f,
    sensor_grid: Grid2D,
    z_span: float,
    n_z: int = 5,
    coarse_step: float = np.radians(15),
    fine_step: float = np.radians(2.5),
) -> float:
    """Dividing-line orientation that best isolates one lobe per half.

    Scores each candidate by the worst single-lobe dominance ratio over both
    halves and ``n_z`` defocus values in ``[-z_span, z_span]``.
    """
    zs = np.linspace(-z_span, z_span, n_z)
    transmission = mask.transmission()

    def score(theta):
        asm = PolarizedMaskAssembly(mask, theta)
        worst = np.inf
        for which in ("A", "B"):
            f = ComplexField(mask.grid, transmission * asm.half(which))
            for z in zs:
                worst = min(worst, lobes.dominance_ratio(raw_psf(f, system, z, sensor_grid)))
        return worst

    coarse = np.arange(0, np.pi, coarse_step)
    scores = [score(t) for t in coarse]
    t0 = coarse[int(np.argmax(scores))]
    fine = t0 + np.arange(-coarse_step, coarse_step + 1e-12, fine_step)
    scores = [score(t) for t in fine]
    return float(fine[int(np.argmax(scores))] % np.pi)


def render_psf_stack(obj, system: System4f, z_samples, sensor_grid: Grid2D, pad: int = 2) -> PsfStack:
    """Render per-depth PSFs for a bare mask or a polarized assembly.

    All planes share one normalization: the transmitted energy of the full
    unpolarized mask. A bare mask yields a single ``full`` channel whose
    planes sum to the fraction of light landing on the sensor window; an
    assembly yields ``0`` and ``90`` channels, each carrying half of the
    light that passes its half-aperture.
    """
    z = np.asarray(z_samples, dtype=np.float64)
    if z.size == 0:
        raise OpticsError("need at least one z sample")
    if np.any(np.diff(z) <= 0):
        raise OpticsError("z samples must be sorted and distinct")
    if isinstance(obj, PolarizedMaskAssembly):
        full = obj.mask.field()
        parts = [
            (obj.channel_of_half[h], obj.half_field(h), POLARIZER_TRANSMISSION) for h in ("A", "B")
        ]
    else:
        full = obj.field() if isinstance(obj, PhaseMask) else obj
        parts = [("full", full, 1.0)]
    aperture = system.aperture(full.grid)
    reference = float(np.sum(np.abs(full.values * aperture) ** 2))
    if reference == 0:
        raise OpticsError("mask transmits no light")
    out = np.empty((len(parts), z.size) + sensor_grid.shape)
    for ci, (_, fld, gain) in enumerate(parts):
        for zi, dz in enumerate(z):
            out[ci, zi] = gain * raw_psf(fld, system, float(dz), sensor_grid, pad) / reference
    np.clip(out, 0, None, out=out)
    return PsfStack(z, tuple(p[0] for p in parts), out, sensor_grid.pitch)


def quantize_phase(mask: PhaseMask, levels: int) -> PhaseMask:
    """Snap every phase to the nearest multiple of 2 pi / levels.

    Exact ties (to float32 resolution) go to the lower level.
    """
    if levels < 2:
        raise OpticsError("quantization needs at least 2 levels")
    step = TWO_PI / levels
    k = mask.phase.astype(np.float64) / step
    frac = k - np.floor(k)
    tie = np.abs(frac - 0.5) < 1e-6
    k = np.where(tie, np.floor(k), np.round(k)) % levels
    phase = np.where(mask.support(), k * step, 0.0)
    return PhaseMask(mask.grid, _wrap_phase(phase), mask.diameter, quantization_levels=levels)


def load_external_mask(path) -> PhaseMask:
    from .io import load_phase_mask

    return load_phase_mask(path)
