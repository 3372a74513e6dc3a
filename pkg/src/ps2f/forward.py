"""Scene-to-sensor simulation: occlusion, depth-sliced convolution, noise, polarization mosaics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft

from .masks import PsfStack


class ForwardModelError(ValueError):
    pass


@dataclass(frozen=True)
class Volume3D:
    """Scene intensities indexed ``values[z, y, x]``.

    ``voxel_pitch`` is ``(px, py, pz)`` in meters and ``z_origin`` is the
    defocus of plane 0. Lateral pitch is expressed at the sensor (unit
    magnification for the relay used throughout).
    """

    values: np.ndarray
    voxel_pitch: tuple[float, float, float]
    z_origin: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "voxel_pitch", tuple(float(p) for p in self.voxel_pitch))
        if v.ndim != 3 or min(v.shape) < 1:
            raise ForwardModelError(f"volume must be 3D with non-empty axes, got shape {v.shape}")
        if np.any(v < 0):
            raise ForwardModelError("volume intensities must be non-negative")
        if len(self.voxel_pitch) != 3 or min(self.voxel_pitch) <= 0:
            raise ForwardModelError("voxel pitch must be three positive lengths")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return (nx, ny, nz)

    @property
    def z_levels(self) -> np.ndarray:
        return self.z_origin + np.arange(self.values.shape[0]) * self.voxel_pitch[2]

    def with_values(self, values) -> "Volume3D":
        return replace(self, values=values)


@dataclass(frozen=True)
class Measurement:
    channels: tuple[str, ...]
    images: np.ndarray
    noise_meta: dict = field(default_factory=lambda: {"poisson": False, "read_sigma": 0.0})

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(str(c) for c in self.channels))
        imgs = np.asarray(self.images)
        object.__setattr__(self, "images", imgs)
        if imgs.ndim != 3 or imgs.shape[0] != len(self.channels):
            raise ForwardModelError("images must be [channel, y, x] with one image per label")

    def channel(self, label: str) -> np.ndarray:
        return self.images[self.channels.index(str(label))]

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:]


@dataclass(frozen=True)
class NoiseConfig:
    poisson: bool = True
    read_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.read_sigma < 0:
            raise ForwardModelError("read_sigma must be non-negative")


def surface_extract(volume: Volume3D, threshold: float = 0.0) -> Volume3D:
    """Keep voxels that can emit toward a camera sitting before plane 0.

    First the shell: opaque voxels (value above ``threshold``) with at least
    one of their six neighbours empty, where outside the volume counts as
    empty. Then camera-side occlusion: walking each (x, y) column from
    plane 0 upward, only the first contiguous run of shell voxels is kept.
    """
    v = volume.values
    solid = v > threshold
    padded = np.pad(solid, 1, constant_values=False)
    interior = np.ones_like(solid)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[core]
    shell = solid & ~interior
    blocked = np.zeros(shell.shape[1:], dtype=bool)
    in_run = np.zeros(shell.shape[1:], dtype=bool)
    keep = np.zeros_like(shell)
    for k in range(shell.shape[0]):
        s = shell[k]
        blocked |= in_run & ~s
        keep[k] = s & ~blocked
        in_run |= s
    return volume.with_values(np.where(keep, v, 0).astype(v.dtype))


def associate_planes(z_levels: np.ndarray, stack: PsfStack) -> np.ndarray:
    """Index of the nearest stack plane for every scene plane."""
    zs = stack.z_samples
    tol = 0.5 * stack.z_spacing + 1e-9 if len(zs) > 1 else 1e-9
    idx = np.abs(z_levels[:, None] - zs[None, :]).argmin(axis=1)
    gap = np.abs(zs[idx] - z_levels)
    if np.any(gap > tol):
        bad = z_levels[gap > tol]
        raise ForwardModelError(
            f"scene planes {bad[:3]} m fall outside the PSF stack range [{zs[0]:.4g}, {zs[-1]:.4g}]"
        )
    return idx


class ImagingOperator:
    """Depth-summed convolution ``I_c = sum_z h_c(z) * s(z)`` and its adjoint.

    Convolutions are linear (zero padded, no wrap-around) and the output is
    cropped to the scene's lateral size with the PSF center at
    ``(kh // 2, kw // 2)``.
    """

    def __init__(self, stack: PsfStack, z_levels, lateral_shape: tuple[int, int], precision: str = "double"):
        if precision not in ("single", "double"):
            raise ForwardModelError("precision must be 'single' or 'double'")
        self.real_dtype = np.float64 if precision == "double" else np.float32
        self.stack = stack
        self.channels = stack.channels
        self.plane_index = associate_planes(np.asarray(z_levels, dtype=float), stack)
        self.ny, self.nx = lateral_shape
        self.kh, self.kw = stack.shape
        self.P = fft.next_fast_len(self.ny + self.kh - 1)
        self.Q = fft.next_fast_len(self.nx + self.kw - 1, real=True)
        kernels = stack.psfs[:, self.plane_index]
        self.otf = fft.rfft2(kernels.astype(self.real_dtype), s=(self.P, self.Q))
        self.otf_conj = self.otf.conj()

    def scale(self, k: float) -> None:
        """Multiply the operator by a constant in place."""
        self.otf *= k
        self.otf_conj *= k

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (len(self.plane_index), self.ny, self.nx)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (len(self.channels), self.ny, self.nx)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.volume_shape:
            raise ForwardModelError(f"volume shape {x.shape} != operator shape {self.volume_shape}")
        X = fft.rfft2(x.astype(self.real_dtype, copy=False), s=(self.P, self.Q))
        Y = np.einsum("czpq,zpq->cpq", self.otf, X)
        full = fft.irfft2(Y, s=(self.P, self.Q))
        return full[:, self.kh // 2:self.kh // 2 + self.ny, self.kw // 2:self.kw // 2 + self.nx]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.shape != self.image_shape:
            raise ForwardModelError(f"image shape {y.shape} != operator shape {self.image_shape}")
        canvas = np.zeros((y.shape[0], self.P, self.Q), dtype=self.real_dtype)
        canvas[:, self.kh // 2:self.kh // 2 + self.ny, self.kw // 2:self.kw // 2 + self.nx] = y
        Y = fft.rfft2(canvas)
        X = np.einsum("czpq,cpq->zpq", self.otf_conj, Y)
        return fft.irfft2(X, s=(self.P, self.Q))[:, :self.ny, :self.nx]


def _check_lateral_pitch(scene: Volume3D, stack: PsfStack) -> None:
    px, py, _ = scene.voxel_pitch
    for p in (px, py):
        if abs(p - stack.pitch) > 1e-3 * stack.pitch:
            raise ForwardModelError(f"scene lateral pitch {p:.4g} m != PSF pitch {stack.pitch:.4g} m")


def image_scene(scene: Volume3D, stack: PsfStack, exposure: float = 1.0) -> Measurement:
    """Noiseless expected image in every channel of ``stack``."""
    _check_lateral_pitch(scene, stack)
    op = ImagingOperator(stack, scene.z_levels, scene.values.shape[1:])
    imgs = exposure * op.forward(scene.values.astype(np.float64))
    return Measurement(stack.channels, np.clip(imgs, 0, None))


def _channel_rngs(seed: int, n: int):
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def add_noise(m: Measurement, cfg: NoiseConfig, clamp: bool = False) -> Measurement:
    """Poisson shot noise, then Gaussian read noise scaled to each image's maximum.

    Each channel draws from its own counter-based stream spawned from
    ``cfg.seed``, so results do not depend on evaluation order.
    """
    out = np.empty(m.images.shape, dtype=np.float64)
    for i, (img, rng) in enumerate(zip(m.images, _channel_rngs(cfg.seed, len(m.channels)))):
        peak = float(img.max())
        noisy = rng.poisson(np.clip(img, 0, None)).astype(np.float64) if cfg.poisson else img.astype(np.float64)
        if cfg.read_sigma > 0:
            noisy = noisy + rng.normal(0.0, cfg.read_sigma * peak, size=img.shape)
        out[i] = noisy
    if clamp:
        np.clip(out, 0, None, out=out)
    meta = {"poisson": cfg.poisson, "read_sigma": cfg.read_sigma, "seed": cfg.seed}
    return Measurement(m.channels, out, meta)


def psnr(reference: np.ndarray, noisy: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference."""
    mse = np.mean((np.asarray(noisy, float) - reference) ** 2)
    return float(10 * np.log10(np.max(reference) ** 2 / mse))


# 2x2 super-pixel layout of the polarization sensor
BAYER_LAYOUT = (("90", "45"), ("135", "0"))


def mosaic_polarization(m: Measurement) -> np.ndarray:
    """Interleave polarization channels into one full-resolution sensor frame.

    45 and 135 degree channels missing from ``m`` are synthesized as the mean
    of the 0 and 90 degree images (unpolarized-equivalent response).
    """
    h, w = m.shape
    if h % 2 or w % 2:
        raise ForwardModelError("mosaicing needs even image dimensions")
    i0, i90 = m.channel("0"), m.channel("90")
    get = {"0": i0, "90": i90}
    for lab in ("45", "135"):
        get[lab] = m.channel(lab) if lab in m.channels else 0.5 * (i0 + i90)
    out = np.empty((h, w), dtype=np.result_type(i0, np.float64))
    for r, row in enumerate(BAYER_LAYOUT):
        for c, lab in enumerate(row):
            out[r::2, c::2] = get[lab][r::2, c::2]
    return out


def demosaic(image: np.ndarray) -> Measurement:
    """Split a polarization frame into half-resolution channel images."""
    h, w = image.shape
    if h % 2 or w % 2:
        raise ForwardModelError("demosaicing needs even image dimensions")
    labels, imgs = [], []
    for r, row in enumerate(BAYER_LAYOUT):
        for c, lab in enumerate(row):
            labels.append(lab)
            imgs.append(image[r::2, c::2])
    return Measurement(tuple(labels), np.stack(imgs))


def unpolarized_equivalent(image: np.ndarray) -> np.ndarray:
    """Average of the four cells in each super-pixel (what a plain sensor would see)."""
    return demosaic(image).images.mean(axis=0)
