"""Binary container format and typed save/load helpers.

Layout (all integers little-endian)::

    b"PS2F"           magic
    u16               format version
    u8                dtype code (1 = float32 little-endian)
    u8                ndim
    u32 * ndim        dims
    u32               attribute block length
    bytes             attributes, UTF-8 JSON object
    u64               data length in bytes (= prod(dims) * 4)
    bytes             raw array data, C order
    u16               number of extra named arrays, each stored as
                      u32 name length, UTF-8 name, then the dtype/ndim/dims/
                      length/data fields above

Attribute JSON is written with sorted keys so identical objects produce
identical bytes.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import DepthMap
from .fisher import CrlbMap, PhotonModel
from .forward import Measurement, Volume3D
from .masks import TWO_PI, PhaseMask, PsfStack, _wrap_phase
from .optics import Grid2D
from .recon import ReconResult

MAGIC = b"PS2F"
VERSION = 1
DTYPES = {1: np.dtype("<f4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class ContainerError(IOError):
    """Malformed or incompatible container; ``offset`` locates the problem."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Container:
    data: np.ndarray
    attrs: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def _array_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<BB", DTYPE_CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    raw = a.tobytes()
    return head + struct.pack("<Q", len(raw)) + raw


def dumps(c: Container) -> bytes:
    attrs = json.dumps(c.attrs, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    a = np.ascontiguousarray(c.data, dtype="<f4")
    out = [MAGIC, struct.pack("<H", VERSION)]
    out.append(struct.pack("<BB", DTYPE_CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    out.append(struct.pack("<I", len(attrs)) + attrs)
    raw = a.tobytes()
    out.append(struct.pack("<Q", len(raw)) + raw)
    out.append(struct.pack("<H", len(c.extras)))
    for name in sorted(c.extras):
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key + _array_bytes(c.extras[name]))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError(
                f"truncated file: needed {n} bytes for {what}, only {len(self.buf) - self.pos} left", self.pos
            )
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self) -> np.ndarray:
        at = self.pos
        code, ndim = self.unpack("<BB", "dtype and ndim")
        if code not in DTYPES:
            raise ContainerError(f"unknown dtype code {code}", at)
        dims = self.unpack(f"<{ndim}I", "dims")
        at = self.pos
        (length,) = self.unpack("<Q", "data length")
        expected = int(np.prod(dims, dtype=np.int64)) * DTYPES[code].itemsize
        if length != expected:
            raise ContainerError(f"data length {length} does not match dims {dims} ({expected} bytes)", at)
        raw = self.take(length, "array data")
        return np.frombuffer(raw, dtype=DTYPES[code]).reshape(dims).copy()


def loads(buf: bytes) -> Container:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"bad magic: expected {MAGIC!r}, found {magic!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}, expected {VERSION}", 4)
    at = r.pos
    code, ndim = r.unpack("<BB", "dtype and ndim")
    if code not in DTYPES:
        raise ContainerError(f"unknown dtype code {code}", at)
    dims = r.unpack(f"<{ndim}I", "dims")
    at = r.pos
    (alen,) = r.unpack("<I", "attribute length")
    try:
        attrs = json.loads(r.take(alen, "attributes").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"attribute block is not valid UTF-8 JSON: {e}", at + 4) from None
    if not isinstance(attrs, dict):
        raise ContainerError("attribute block must be a JSON object", at + 4)
    at = r.pos
    (length,) = r.unpack("<Q", "data length")
    expected = int(np.prod(dims, dtype=np.int64)) * DTYPES[code].itemsize
    if length != expected:
        raise ContainerError(f"data length {length} does not match dims {dims} ({expected} bytes)", at)
    data = np.frombuffer(r.take(length, "array data"), dtype=DTYPES[code]).reshape(dims).copy()
    (n_extra,) = r.unpack("<H", "extra array count")
    extras = {}
    for _ in range(n_extra):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "array name").decode("utf-8")
        extras[name] = r.array()
    if r.pos != len(buf):
        raise ContainerError(f"{len(buf) - r.pos} trailing bytes after last array", r.pos)
    return Container(data, attrs, extras)


def write_container(path, c: Container) -> None:
    try:
        Path(path).write_bytes(dumps(c))
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e


def read_container(path) -> Container:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read {path}: {e}") from e
    return loads(buf)


def _require(attrs: dict, kind: str, keys) -> None:
    if attrs.get("kind") != kind:
        raise ContainerError(f"expected a {kind} container, found kind={attrs.get('kind')!r}")
    missing = [k for k in keys if k not in attrs]
    if missing:
        raise ContainerError(f"{kind} attributes missing {missing}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- phase masks ------------------------------------------------------------

def save_phase_mask(mask: PhaseMask, path, extra_attrs: dict | None = None) -> None:
    attrs = {
        "kind": "PhaseMask",
        "pitch": mask.grid.pitch,
        "diameter": mask.diameter,
        "quantization_levels": mask.quantization_levels,
        "diagnostics": _jsonable(mask.diagnostics or {}),
        **(extra_attrs or {}),
    }
    write_container(path, Container(mask.phase, attrs))


def load_phase_mask(path) -> PhaseMask:
    """Load a mask, wrapping any phase outside [0, 2 pi) with a warning."""
    c = read_container(path)
    _require(c.attrs, "PhaseMask", ("pitch", "diameter"))
    if c.data.ndim != 2:
        raise ContainerError(f"phase mask must be 2D, found {c.data.ndim}D")
    h, w = c.data.shape
    phase = c.data
    diag = dict(c.attrs.get("diagnostics") or {})
    if not np.all(np.isfinite(phase)):
        raise ContainerError("phase mask contains non-finite values")
    if phase.min() < 0 or phase.max() >= np.float32(TWO_PI):
        warnings.warn(f"{path}: phase outside [0, 2 pi) wrapped into range", stacklevel=2)
        diag["wrapped_on_load"] = True
        phase = _wrap_phase(phase)
    return PhaseMask(
        Grid2D(w, h, float(c.attrs["pitch"])),
        phase,
        float(c.attrs["diameter"]),
        quantization_levels=c.attrs.get("quantization_levels"),
        diagnostics=diag,
    )


# -- PSF stacks -------------------------------------------------------------

def save_psf_stack(stack: PsfStack, path, extra_attrs: dict | None = None) -> None:
    attrs = {
        "kind": "PsfStack",
        "z_samples": stack.z_samples.tolist(),
        "channels": list(stack.channels),
        "pitch": stack.pitch,
        **(extra_attrs or {}),
    }
    write_container(path, Container(stack.psfs, attrs))


def load_psf_stack(path) -> PsfStack:
    c = read_container(path)
    _require(c.attrs, "PsfStack", ("z_samples", "channels", "pitch"))
    return PsfStack(np.array(c.attrs["z_samples"]), tuple(c.attrs["channels"]), c.data, float(c.attrs["pitch"]))


# -- volumes and measurements ----------------------------------------------

def _volume_attrs(v: Volume3D) -> dict:
    return {"kind": "Volume3D", "voxel_pitch": list(v.voxel_pitch), "z_origin": v.z_origin}


def save_volume(v: Volume3D, path, extra_attrs: dict | None = None) -> None:
    write_container(path, Container(v.values, {**_volume_attrs(v), **(extra_attrs or {})}))


def _volume_from(c: Container) -> Volume3D:
    missing = [k for k in ("voxel_pitch", "z_origin") if k not in c.attrs]
    if missing:
        raise ContainerError(f"volume attributes missing {missing}")
    if c.data.ndim != 3:
        raise ContainerError(f"volume must be 3D, found {c.data.ndim}D")
    return Volume3D(c.data, tuple(c.attrs["voxel_pitch"]), float(c.attrs["z_origin"]))


def load_volume(path) -> Volume3D:
    c = read_container(path)
    _require(c.attrs, "Volume3D", ())
    return _volume_from(c)


def save_measurement(m: Measurement, path, extra_attrs: dict | None = None) -> None:
    attrs = {
        "kind": "Measurement",
        "channels": list(m.channels),
        "noise_meta": _jsonable(m.noise_meta),
        **(extra_attrs or {}),
    }
    write_container(path, Container(m.images, attrs))


def load_measurement(path) -> Measurement:
    c = read_container(path)
    _require(c.attrs, "Measurement", ("channels",))
    return Measurement(tuple(c.attrs["channels"]), c.data, c.attrs.get("noise_meta", {}))


# -- CRLB maps --------------------------------------------------------------

def save_crlb_map(cm: CrlbMap, path, extra_attrs: dict | None = None) -> None:
    attrs = {
        "kind": "CrlbMap",
        "z_grid": cm.z_grid.tolist(),
        "phi_grid": cm.phi_grid.tolist(),
        "signal_photons": cm.photon_model.signal_photons,
        "background": cm.photon_model.background,
        "psf_label": cm.psf_label,
        "settings": _jsonable(cm.settings),
        **(extra_attrs or {}),
    }
    write_container(path, Container(cm.sqrt_crlb_z, attrs, {"sqrt_crlb_phi": cm.sqrt_crlb_phi}))


def load_crlb_map(path) -> CrlbMap:
    c = read_container(path)
    _require(c.attrs, "CrlbMap", ("z_grid", "phi_grid", "signal_photons", "background"))
    if "sqrt_crlb_phi" not in c.extras:
        raise ContainerError("CrlbMap container lacks the sqrt_crlb_phi array")
    return CrlbMap(
        np.array(c.attrs["z_grid"]),
        np.array(c.attrs["phi_grid"]),
        c.data,
        c.extras["sqrt_crlb_phi"],
        PhotonModel(c.attrs["signal_photons"], c.attrs["background"]),
        c.attrs.get("psf_label", ""),
        c.attrs.get("settings", {}),
    )


# -- reconstructions --------------------------------------------------------

def save_recon_result(res: ReconResult, path, extra_attrs: dict | None = None) -> None:
    attrs = {
        **_volume_attrs(res.volume),
        "kind": "ReconResult",
        "converged": bool(res.converged),
        "config": _jsonable(res.config),
        **(extra_attrs or {}),
    }
    extras = {"loss_trace": res.loss_trace}
    if res.weights is not None:
        extras["weights"] = res.weights
    write_container(path, Container(res.volume.values, attrs, extras))


def load_recon_result(path) -> ReconResult:
    c = read_container(path)
    _require(c.attrs, "ReconResult", ("converged",))
    if "loss_trace" not in c.extras:
        raise ContainerError("ReconResult container lacks the loss_trace array")
    return ReconResult(
        _volume_from(c),
        c.extras["loss_trace"],
        bool(c.attrs["converged"]),
        c.extras.get("weights"),
        c.attrs.get("config", {}),
    )


# -- depth maps -------------------------------------------------------------

def save_depth_map(dm: DepthMap, path, extra_attrs: dict | None = None) -> None:
    """Depth in meters; invalid pixels are stored as NaN."""
    attrs = {"kind": "DepthMap", "z_levels": dm.z_levels.tolist(), **(extra_attrs or {})}
    write_container(path, Container(np.where(dm.valid, dm.depth, np.nan), attrs))


def load_depth_map(path) -> DepthMap:
    c = read_container(path)
    _require(c.attrs, "DepthMap", ("z_levels",))
    if c.data.ndim != 2:
        raise ContainerError(f"depth map must be 2D, found {c.data.ndim}D")
    valid = np.isfinite(c.data)
    return DepthMap(np.where(valid, c.data, np.nan), valid, np.array(c.attrs["z_levels"]))


LOADERS = {
    "PhaseMask": load_phase_mask,
    "PsfStack": load_psf_stack,
    "Volume3D": load_volume,
    "Measurement": load_measurement,
    "CrlbMap": load_crlb_map,
    "ReconResult": load_recon_result,
    "DepthMap": load_depth_map,
}


def load_any(path):
    kind = read_container(path).attrs.get("kind")
    if kind not in LOADERS:
        raise ContainerError(f"unknown container kind {kind!r}")
    return LOADERS[kind](path)


def save_any(obj, path, extra_attrs: dict | None = None) -> None:
    for cls, fn in (
        (PhaseMask, save_phase_mask),
        (PsfStack, save_psf_stack),
        (Volume3D, save_volume),
        (Measurement, save_measurement),
        (CrlbMap, save_crlb_map),
        (ReconResult, save_recon_result),
        (DepthMap, save_depth_map),
    ):
        if isinstance(obj, cls):
            return fn(obj, path, extra_attrs)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# -- VascuSynth import ------------------------------------------------------

DEFAULT_EXTENT = (1.76e-3, 1.76e-3, 5.00e-3)


def read_raw_grid(path, dims: tuple[int, int, int] | None = None, dtype: str = "<u1") -> np.ndarray:
    """Read a voxel grid as ``[z, y, x]``.

    Plain-text files hold one value per voxel (whitespace separated, x
    fastest) with an optional header line ``nx ny nz``; ``.npy`` files are
    read directly; anything else is raw binary of ``dtype`` and needs
    ``dims`` (nx, ny, nz).
    """
    path = Path(path)
    try:
        if path.suffix == ".npy":
            return np.load(path).astype(np.float64)
        if path.suffix in (".txt", ".dat", ".csv"):
            text = path.read_text().replace(",", " ").split("\n")
            first = text[0].split()
            if dims is None and len(first) == 3 and len(text) > 1 and all(t.isdigit() for t in first):
                dims = tuple(int(t) for t in first)
                text = text[1:]
            values = np.array(" ".join(text).split(), dtype=np.float64)
        else:
            values = np.fromfile(path, dtype=dtype).astype(np.float64)
    except (OSError, ValueError) as e:
        raise ContainerError(f"cannot read voxel grid {path}: {e}") from e
    if dims is None:
        n = round(values.size ** (1 / 3))
        if n**3 != values.size:
            raise ContainerError(f"{path}: {values.size} voxels is not a cube; pass dims explicitly")
        dims = (n, n, n)
    nx, ny, nz = dims
    if values.size != nx * ny * nz:
        raise ContainerError(f"{path}: found {values.size} voxels, dims {dims} need {nx * ny * nz}")
    return values.reshape(nz, ny, nx)


def resample_trilinear(grid: np.ndarray, target_shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinear resample with corner voxels aligned (identity when shapes match)."""
    from scipy import ndimage

    grid = np.asarray(grid, dtype=np.float64)
    if tuple(target_shape) == grid.shape:
        return grid.copy()
    coords = [np.linspace(0, s - 1, t) for s, t in zip(grid.shape, target_shape)]
    mesh = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(grid, mesh, order=1, mode="nearest")


def import_vascusynth(path, target_dims=(256, 256, 256), target_extent=DEFAULT_EXTENT,
                      z_origin: float | None = None, dims=None) -> Volume3D:
    """VascuSynth voxel grid resampled to ``target_dims`` = (nx, ny, nz).

    Voxel pitch is ``extent / dims`` per axis; by default the volume is
    centered on focus.
    """
    src = read_raw_grid(path, dims)
    if src.size == 0 or not np.all(np.isfinite(src)):
        raise ContainerError(f"{path}: empty or non-finite voxel grid")
    nx, ny, nz = (int(d) for d in target_dims)
    vol = np.clip(resample_trilinear(src, (nz, ny, nx)), 0, None)
    pitch = tuple(e / n for e, n in zip(target_extent, (nx, ny, nz)))
    if z_origin is None:
        z_origin = -0.5 * (nz - 1) * pitch[2]
    return Volume3D(vol, pitch, z_origin)

