"""Procedural test scenes: branching vessel trees, tilted lines, point sources."""

from __future__ import annotations

import numpy as np

from .forward import Volume3D


def _centered_volume(values: np.ndarray, lateral_pitch: float, z_range: tuple[float, float]) -> Volume3D:
    nz = values.shape[0]
    z0, z1 = z_range
    dz = (z1 - z0) / (nz - 1) if nz > 1 else 1.0
    return Volume3D(values, (lateral_pitch, lateral_pitch, dz), z0)


def _stamp_tube(vol: np.ndarray, p0, p1, radius: float, scale) -> None:
    """Fill voxels within ``radius`` (lateral voxel units) of segment p0-p1.

    ``scale`` converts (z, y, x) voxel offsets to a common metric so tubes
    stay round despite anisotropic voxels.
    """
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    lo = np.maximum(np.floor(np.minimum(p0, p1) - radius / scale - 1).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(p0, p1) + radius / scale + 2).astype(int), vol.shape)
    if np.any(hi <= lo):
        return
    zz, yy, xx = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    pts = np.stack([zz, yy, xx], axis=-1).astype(float)
    d = (p1 - p0) * scale
    rel = (pts - p0) * scale
    t = np.clip((rel @ d) / max(d @ d, 1e-12), 0, 1)
    dist = np.linalg.norm(rel - t[..., None] * d, axis=-1)
    sub = vol[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub[dist <= radius] = 1.0


def vessel_tree(
    dims=(64, 64, 64),
    seed: int = 0,
    depth: int = 4,
    root_radius: float = 2.0,
    z_stretch: float = 1.0,
) -> np.ndarray:
    """Binary branching-tube volume indexed ``[z, y, x]``.

    A trunk enters from one lateral face and splits recursively; each child
    turns by a random angle, wanders in depth and thins by ~0.75. The
    result resembles the vascular phantoms used for depth-imaging studies.
    ``z_stretch`` scales how many planes a unit of depth travel spans.
    """
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    vol = np.zeros((nz, ny, nx))
    scale = np.array([1.0 / z_stretch, 1.0, 1.0])
    size = np.array([nz, ny, nx], float)

    def grow(p, direction, radius, length, level):
        end = p + direction * length
        end = np.clip(end, 0, size - 1)
        _stamp_tube(vol, p, end, radius, scale)
        if level == 0:
            return
        for sign in (-1, 1):
            ang = sign * rng.uniform(0.35, 0.9)
            c, s = np.cos(ang), np.sin(ang)
            dy, dx = direction[1], direction[2]
            lat = np.array([c * dy - s * dx, s * dy + c * dx])
            dzv = rng.uniform(-0.9, 0.9)
            child = np.array([dzv, *lat])
            child /= np.linalg.norm(child)
            grow(end, child, max(radius * 0.75, 0.8), length * rng.uniform(0.6, 0.8), level - 1)

    start = np.array([rng.uniform(0.3, 0.7) * nz, rng.uniform(0.3, 0.7) * ny, 0.0])
    direction = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    direction /= np.linalg.norm(direction)
    grow(start, direction, root_radius, 0.4 * nx, depth)
    return vol


def vessel_scene(dims=(64, 64, 64), seed: int = 0, lateral_pitch: float = 6.875e-6,
                 z_range=(-2.5e-3, 2.5e-3), **kw) -> Volume3D:
    return _centered_volume(vessel_tree(dims, seed, **kw), lateral_pitch, z_range)


def tilted_line(
    dims=(128, 128, 64),
    angle: float = 0.0,
    slope: float = 0.3,
    length: float | None = None,
    intensity: float = 1.0,
    taper: float = 0.25,
) -> np.ndarray:
    """A one-voxel-wide line through the lateral center at orientation ``angle``.

    Along the line coordinate ``s`` (pixels from the center) the depth plane
    is ``(nz - 1) / 2 + slope * s`` rounded to the nearest plane, so lines
    with opposite slopes are exact depth mirrors of each other. The outer
    ``taper`` fraction at each end fades out with a raised cosine.
    """
    nx, ny, nz = dims
    vol = np.zeros((nz, ny, nx))
    if length is None:
        length = 0.75 * min(nx, ny)
    cy, cx = ny // 2, nx // 2
    # samples straddle s = 0 so no sample sits on the (possibly absent) center plane
    s = np.arange(-length / 2 + 0.125, length / 2, 0.25)
    x = np.rint(cx + s * np.cos(angle)).astype(int)
    y = np.rint(cy + s * np.sin(angle)).astype(int)
    u = (nz - 1) / 2 + slope * s
    # round half away from the center plane pair so the +/- slope lines mirror exactly
    mid = (nz - 1) / 2
    z = (mid + np.sign(u - mid) * np.floor(np.abs(u - mid) + 0.5)).astype(int) if nz % 2 else \
        (mid + np.sign(u - mid) * (np.floor(np.abs(u - mid)) + 0.5)).astype(int)
    edge = (length / 2 - np.abs(s)) / max(taper * length, 1e-12)
    weight = np.where(edge >= 1, 1.0, 0.5 - 0.5 * np.cos(np.pi * np.clip(edge, 0, 1)))
    ok = (x >= 0) & (x < nx) & (y >= 0) & (y < ny) & (z >= 0) & (z < nz)
    vol[z[ok], y[ok], x[ok]] = intensity * weight[ok]
    return vol


def line_scene(dims=(128, 128, 64), angle: float = 0.0, slope: float = 0.3, lateral_pitch: float = 6.875e-6,
               z_range=(-2.5e-3, 2.5e-3), **kw) -> Volume3D:
    return _centered_volume(tilted_line(dims, angle, slope, **kw), lateral_pitch, z_range)


def point_scene(dims, points, lateral_pitch: float = 6.875e-6, z_range=(-2.5e-3, 2.5e-3)) -> Volume3D:
    """Isolated voxels at ``(x, y, z_index, value)`` tuples."""
    nx, ny, nz = dims
    vol = np.zeros((nz, ny, nx))
    for x, y, k, val in points:
        vol[k, y, x] = val
    return _centered_volume(vol, lateral_pitch, z_range)
