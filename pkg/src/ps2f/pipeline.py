"""Pipeline stages driven by a :class:`PipelineConfig`.

Each stage is a plain function so the CLI, the tests and notebooks share
one code path: design a mask, render its PSF stack, build a scene, image
it with noise, reconstruct, and score the MIP depth map.
"""

from __future__ import annotations

import numpy as np

from .config import ConfigError, PipelineConfig
from .evaluate import DepthMap, ScoreReport, mip_depth, score
from .fisher import CrlbMap, PhotonModel, crlb_map
from .forward import Measurement, NoiseConfig, Volume3D, add_noise, image_scene, surface_extract
from .io import import_vascusynth, load_volume
from .masks import (
    GSConfig,
    PhaseMask,
    PsfStack,
    design_dhpsf_mask,
    find_partition_axis,
    load_external_mask,
    partition_mask,
    perpendicular_partition_axis,
    quantize_phase,
    render_psf_stack,
)
from .optics import GLBeamSpec, Grid2D, System4f, equivalent_rayleigh
from .recon import ReconResult, solve
from .scenes import line_scene, point_scene, vessel_scene


def system(cfg: PipelineConfig) -> System4f:
    o = cfg.optics
    return System4f(o.f1, o.f2, o.aperture_diameter, o.wavelength)


def beam(cfg: PipelineConfig) -> GLBeamSpec:
    m = cfg.mask
    return GLBeamSpec(tuple(m.modes), m.waist, m.slope, m.intercept)


def sensor_grid(cfg: PipelineConfig) -> Grid2D:
    return Grid2D.square(cfg.sensor.psf_size, cfg.sensor.pitch)


def z_samples(cfg: PipelineConfig) -> np.ndarray:
    d = cfg.depth
    return np.linspace(d.z_min, d.z_max, d.planes)


def design_mask(cfg: PipelineConfig) -> tuple[PhaseMask, float]:
    """Designed (or externally supplied) mask and its half-aperture split angle."""
    m = cfg.mask
    sysm = system(cfg)
    if m.external_mask:
        mask = load_external_mask(m.external_mask)
    else:
        gs = GSConfig(m.gs_iterations, True, m.convergence_tol, m.weight_band)
        mask = design_dhpsf_mask(beam(cfg), sysm, sysm.pupil_grid(m.pupil_samples), gs)
    if m.quantization_levels:
        mask = quantize_phase(mask, m.quantization_levels)
    return mask, partition_angle(cfg, mask)


def partition_angle(cfg: PipelineConfig, mask: PhaseMask) -> float:
    """Half-aperture dividing line: searched, perpendicular to the lobes, or fixed."""
    axis = cfg.mask.partition_axis
    sysm = system(cfg)
    if axis == "auto":
        angle = find_partition_axis(mask, sysm, sensor_grid(cfg), equivalent_rayleigh(sysm, cfg.mask.waist))
    elif axis == "perpendicular":
        angle = perpendicular_partition_axis(mask, sysm, sensor_grid(cfg))
    else:
        angle = float(axis)
    return angle % np.pi


def render_stack(cfg: PipelineConfig, mask: PhaseMask, angle: float, z=None, psf=None) -> PsfStack:
    psf = psf or cfg.imaging.psf
    obj = partition_mask(mask, angle) if psf == "ps2f" else mask
    return render_psf_stack(obj, system(cfg), z_samples(cfg) if z is None else z, sensor_grid(cfg))


def make_scene(cfg: PipelineConfig) -> Volume3D:
    s = cfg.scene
    zr = (cfg.depth.z_min, cfg.depth.z_max)
    pitch = cfg.sensor.pitch
    if s.source == "vessel":
        vol = vessel_scene(s.dims, s.seed, pitch, zr)
    elif s.source == "line":
        vol = line_scene(s.dims, 0.0, s.line_slope, pitch, zr)
    elif s.source == "points":
        vol = point_scene(s.dims, s.points, pitch, zr)
    elif s.source == "file":
        vol = load_volume(_need_path(s))
    else:
        extent = s.extent or (s.dims[0] * pitch, s.dims[1] * pitch, zr[1] - zr[0])
        vol = import_vascusynth(_need_path(s), s.dims, extent)
    return surface_extract(vol) if s.surface_only else vol


def _need_path(s) -> str:
    if not s.path:
        raise ConfigError(f"scene source {s.source!r} needs scene.path")
    return s.path


def simulate(cfg: PipelineConfig, scene: Volume3D, stack: PsfStack) -> Measurement:
    n = cfg.noise
    clean = image_scene(scene, stack, cfg.imaging.exposure)
    return add_noise(clean, NoiseConfig(n.poisson, n.read_sigma, n.seed))


def reconstruct(cfg: PipelineConfig, meas: Measurement, stack: PsfStack, like: Volume3D | None = None,
                callback=None) -> ReconResult:
    return solve(meas, stack, cfg.recon_config(), like=like, callback=callback)


def evaluate(cfg: PipelineConfig, recon: Volume3D, truth: Volume3D | DepthMap) -> tuple[DepthMap, ScoreReport]:
    thr = cfg.evaluate.threshold
    ref = truth if isinstance(truth, DepthMap) else mip_depth(truth, thr)
    pred = mip_depth(recon, thr)
    return pred, score(pred, ref)


def crlb(cfg: PipelineConfig, stack: PsfStack) -> CrlbMap:
    c = cfg.crlb
    zs = stack.z_samples
    zg = np.linspace(zs[0] + c.z_margin, zs[-1] - c.z_margin, c.z_points)
    pg = np.arange(c.phi_points) * np.pi / c.phi_points
    label = "ps2f" if len(stack.channels) > 1 else "dhpsf"
    return crlb_map(stack, zg, pg, PhotonModel(c.signal_photons, c.background),
                    patch_size=c.patch_size, line_width=c.line_width, label=label)
