"""Pipeline configuration: schema, unit parsing and canonical hashing.

Lengths are written with explicit units ("532nm", "50 mm", "6.875um") and
stored in meters; angles accept "deg" or "rad" suffixes and are stored in
radians. Unknown keys anywhere in the document are rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from decimal import Decimal
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationError,
    field_validator,
    model_validator,
)

LENGTH_UNITS = {"nm": "1e-9", "um": "1e-6", "µm": "1e-6", "μm": "1e-6", "mm": "1e-3", "cm": "1e-2", "m": "1"}
ANGLE_UNITS = {"deg": math.pi / 180, "rad": 1.0}

_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([^\d\s].*?)?\s*$")


class ConfigError(ValueError):
    pass


def _parse(value, units: dict, kind: str, bare_ok: bool) -> float:
    if isinstance(value, bool):
        raise ValueError(f"{kind} cannot be a boolean")
    if isinstance(value, (int, float)):
        if not bare_ok:
            raise ValueError(f"{kind} {value!r} needs an explicit unit, e.g. {next(iter(units))}")
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"cannot read {kind} from {value!r}")
    m = _QUANTITY.match(value)
    if not m:
        raise ValueError(f"cannot parse {kind} {value!r}")
    number, unit = m.groups()
    if unit is None:
        if not bare_ok:
            raise ValueError(f"{kind} {value!r} needs an explicit unit")
        return float(number)
    if unit not in units:
        raise ValueError(f"unknown {kind} unit {unit!r}; expected one of {sorted(units)}")
    scale = units[unit]
    if isinstance(scale, str):
        # decimal arithmetic so "6.875um" lands on the float nearest 6.875e-6
        return float(Decimal(number) * Decimal(scale))
    return float(number) * scale


def parse_length(value) -> float:
    """Meters from a string with a unit; bare numbers are rejected."""
    return _parse(value, LENGTH_UNITS, "length", bare_ok=False)


def parse_angle(value) -> float:
    """Radians from a string with "deg" or "rad"; bare numbers are radians."""
    return _parse(value, ANGLE_UNITS, "angle", bare_ok=True)


# serialized back with units so dumped configs reload unchanged
Length = Annotated[float, BeforeValidator(parse_length), PlainSerializer(lambda v: f"{v!r}m", return_type=str)]
Angle = Annotated[float, BeforeValidator(parse_angle), PlainSerializer(lambda v: f"{v!r}rad", return_type=str)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class OpticsConfig(_Strict):
    wavelength: Length = 532e-9
    f1: Length = 50e-3
    f2: Length = 50e-3
    aperture_diameter: Length = 3e-3


class MaskConfig(_Strict):
    modes: list[tuple[int, int]] = [(1, 1), (5, 3), (9, 5), (13, 7)]
    waist: Length = 0.4e-3
    slope: int = 2
    intercept: int = -1
    pupil_samples: int = Field(256, ge=16)
    gs_iterations: int = Field(200, ge=1)
    convergence_tol: float = Field(1e-5, ge=0)
    weight_band: float = Field(1.0, ge=1)
    quantization_levels: Optional[int] = Field(None, ge=2)
    partition_axis: Union[Literal["auto", "perpendicular"], Angle] = "auto"
    external_mask: Optional[str] = None


class SensorConfig(_Strict):
    pitch: Length = 6.875e-6
    psf_size: int = Field(64, ge=8)


class DepthConfig(_Strict):
    z_min: Length = -2.5e-3
    z_max: Length = 2.5e-3
    planes: int = Field(64, ge=1)

    @field_validator("z_max")
    @classmethod
    def _ordered(cls, v, info):
        if "z_min" in info.data and v < info.data["z_min"]:
            raise ValueError("z_max must not be below z_min")
        return v


class SceneConfig(_Strict):
    source: Literal["vessel", "line", "points", "file", "vascusynth"] = "vessel"
    path: Optional[str] = None
    dims: tuple[int, int, int] = (64, 64, 64)
    extent: Optional[tuple[Length, Length, Length]] = None
    seed: int = 0
    surface_only: bool = True
    line_slope: float = 0.3
    points: list[tuple[int, int, int, float]] = []


class ImagingConfig(_Strict):
    psf: Literal["ps2f", "dhpsf"] = "ps2f"
    exposure: float = Field(200.0, gt=0)


class NoiseSection(_Strict):
    poisson: bool = True
    read_sigma: float = Field(0.02, ge=0)
    seed: int = 0


class ReconSection(_Strict):
    preset: Optional[Literal["usaf", "beads", "strands"]] = "strands"
    lambda_tv: Optional[float] = Field(None, ge=0)
    lambda_l1: Optional[float] = Field(None, ge=0)
    iterations: int = Field(300, ge=1)
    step_size: float = Field(0.05, gt=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    nonneg: bool = True
    estimate_weights: bool = False
    precision: Literal["single", "double"] = "single"


class EvaluateConfig(_Strict):
    threshold: float = Field(0.02, ge=0, le=1)


class CrlbConfig(_Strict):
    z_points: int = Field(16, ge=1)
    phi_points: int = Field(16, ge=1)
    z_margin: Length = 0.2e-3
    signal_photons: float = Field(100_000, gt=0)
    background: float = Field(5.0, ge=0)
    patch_size: int = Field(64, ge=16)
    line_width: float = Field(1.0, gt=0)


class PipelineConfig(_Strict):
    optics: OpticsConfig = OpticsConfig()
    mask: MaskConfig = MaskConfig()
    sensor: SensorConfig = SensorConfig()
    depth: DepthConfig = DepthConfig()
    scene: SceneConfig = SceneConfig()
    imaging: ImagingConfig = ImagingConfig()
    noise: NoiseSection = NoiseSection()
    recon: ReconSection = ReconSection()
    evaluate: EvaluateConfig = EvaluateConfig()
    crlb: CrlbConfig = CrlbConfig()

    @model_validator(mode="after")
    def _scene_matches_depth(self):
        if self.scene.source in ("vessel", "line", "points") and self.scene.dims[2] != self.depth.planes:
            raise ValueError(
                f"generated scenes use the depth grid: scene.dims[2]={self.scene.dims[2]} "
                f"but depth.planes={self.depth.planes}"
            )
        return self

    def canonical_json(self) -> str:
        """Key-sorted compact JSON of the fully resolved config (SI units)."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def recon_config(self):
        from .recon import PRESETS, ReconConfig

        r = self.recon
        lam = dict(PRESETS[r.preset]) if r.preset else {"lambda_tv": 0.0, "lambda_l1": 0.0}
        if r.lambda_tv is not None:
            lam["lambda_tv"] = r.lambda_tv
        if r.lambda_l1 is not None:
            lam["lambda_l1"] = r.lambda_l1
        return ReconConfig(
            iterations=r.iterations,
            step_size=r.step_size,
            adam_betas=r.adam_betas,
            adam_eps=r.adam_eps,
            nonneg=r.nonneg,
            estimate_weights=r.estimate_weights,
            seed=self.noise.seed,
            precision=r.precision,
            **lam,
        )


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read and validate a YAML (or JSON) config; ``None`` gives the defaults."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    for dotted, value in (overrides or {}).items():
        node = doc
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
