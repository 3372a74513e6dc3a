"""Regularized least-squares volume reconstruction from channel images.

Minimizes

    sum_c || I_c - w_c * sum_z h_c(z) * x(z) ||^2 + lambda_tv TV(x) + lambda_l1 |x|_1

with Adam, where ``w_c`` are optional per-pixel channel weights (all ones
unless weight estimation is switched on) and TV is the anisotropic L1 norm
of forward differences along x, y and z.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .forward import ForwardModelError, ImagingOperator, Measurement, Volume3D
from .masks import PsfStack

PRESETS = {
    "usaf": {"lambda_l1": 0.02, "lambda_tv": 0.005},
    "beads": {"lambda_l1": 0.05, "lambda_tv": 0.0},
    "strands": {"lambda_l1": 0.002, "lambda_tv": 0.002},
}

WEIGHT_FLOOR = 1e-6


class ReconError(RuntimeError):
    pass


class DivergenceError(ReconError):
    def __init__(self, msg: str, loss_trace):
        super().__init__(msg)
        self.loss_trace = np.asarray(loss_trace)


@dataclass(frozen=True)
class ReconConfig:
    lambda_tv: float = 0.0
    lambda_l1: float = 0.0
    iterations: int = 2000
    step_size: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    nonneg: bool = True
    estimate_weights: bool = False
    seed: int = 0
    weight_lr_ratio: float = 0.1
    normalize: bool = True
    precision: str = "double"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.lambda_tv < 0 or self.lambda_l1 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not all(0 <= b < 1 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if not self.step_size > 0 or not self.adam_eps > 0:
            raise ValueError("step size and eps must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ReconConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class ReconResult:
    volume: Volume3D
    loss_trace: np.ndarray
    converged: bool
    weights: np.ndarray | None = None
    config: dict = field(default_factory=dict)


def tv_norm(x: np.ndarray) -> float:
    return float(sum(np.abs(np.diff(x, axis=a)).sum() for a in range(x.ndim)))


def _tv_subgradient(x: np.ndarray) -> np.ndarray:
    g = np.zeros_like(x)
    for a in range(x.ndim):
        s = np.sign(np.diff(x, axis=a))
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        g[tuple(lo)] -= s
        g[tuple(hi)] += s
    return g


class _Problem:
    """Operator, data and regularization for one reconstruction."""

    def __init__(self, volume_like: Volume3D, meas: Measurement, stack: PsfStack, cfg: ReconConfig):
        try:
            stack = stack.select(meas.channels)
        except ValueError:
            raise ForwardModelError(
                f"measurement channels {meas.channels} not all present in stack {stack.channels}"
            ) from None
        self.op = ImagingOperator(stack, volume_like.z_levels, meas.shape, cfg.precision)
        if volume_like.values.shape != self.op.volume_shape:
            raise ForwardModelError("volume lateral shape does not match the measurement")
        self.data = np.asarray(meas.images, dtype=np.float64)
        self.cfg = cfg

    def residual(self, x, w):
        ax = self.op.forward(x)
        return ax, w * ax - self.data

    def objective(self, x, w=1.0) -> float:
        _, r = self.residual(x, w)
        return self._total(x, r)

    def _total(self, x, r) -> float:
        val = float(np.sum(r * r))
        if self.cfg.lambda_tv:
            val += self.cfg.lambda_tv * tv_norm(x)
        if self.cfg.lambda_l1:
            val += self.cfg.lambda_l1 * float(np.abs(x).sum())
        return val

    def gradients(self, x, w=1.0):
        """Objective value with the scene gradient and the weight gradient."""
        ax, r = self.residual(x, w)
        gx = 2 * self.op.adjoint(w * r)
        if self.cfg.lambda_tv:
            gx += self.cfg.lambda_tv * _tv_subgradient(x)
        if self.cfg.lambda_l1:
            gx += self.cfg.lambda_l1 * np.sign(x)
        gw = 2 * r * ax
        return self._total(x, r), gx, gw


def _as_volume(x) -> Volume3D:
    if not isinstance(x, Volume3D):
        raise TypeError("expected a Volume3D")
    return x


def objective(x: Volume3D, meas: Measurement, stack: PsfStack, cfg: ReconConfig, weights=None) -> float:
    x = _as_volume(x)
    p = _Problem(x, meas, stack, cfg)
    return p.objective(x.values.astype(np.float64), 1.0 if weights is None else weights)


def gradient(x: Volume3D, meas: Measurement, stack: PsfStack, cfg: ReconConfig, weights=None) -> np.ndarray:
    """Scene gradient of the objective; L1 and TV use sign(0) = 0."""
    x = _as_volume(x)
    p = _Problem(x, meas, stack, cfg)
    return p.gradients(x.values.astype(np.float64), 1.0 if weights is None else weights)[1]


class _Adam:
    def __init__(self, shape, lr, betas, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def _template(meas: Measurement, stack: PsfStack, like: Volume3D | None) -> Volume3D:
    if like is not None:
        return like
    pitch = (stack.pitch, stack.pitch, stack.z_spacing or 1.0)
    shape = (len(stack.z_samples),) + tuple(meas.shape)
    return Volume3D(np.zeros(shape), pitch, float(stack.z_samples[0]))


def _scales(meas: Measurement, stack: PsfStack, cfg: ReconConfig) -> tuple[float, float]:
    """Data scale and scene scale used to precondition the problem.

    The data are divided by their maximum and the scene unit is chosen so
    that a unit voxel at the brightest PSF plane peaks at one.
    """
    if not cfg.normalize:
        return 1.0, 1.0
    dmax = float(np.max(np.abs(meas.images)))
    hmax = float(stack.select(meas.channels).psfs.max())
    if dmax == 0 or hmax == 0:
        return 1.0, 1.0
    return dmax, dmax / hmax


def _converged(trace: np.ndarray, window: int = 10, rtol: float = 1e-3) -> bool:
    if len(trace) < 2 * window:
        return False
    a, b = trace[-2 * window:-window].mean(), trace[-window:].mean()
    return abs(a - b) <= rtol * max(abs(a), 1e-300)


def _run(meas, stack, cfg: ReconConfig, like=None, x0=None, w0=None, estimate_weights=False, callback=None):
    tmpl = _template(meas, stack, like)
    dscale, xscale = _scales(meas, stack, cfg)
    scaled = Measurement(meas.channels, np.asarray(meas.images, dtype=np.float64) / dscale, meas.noise_meta)
    p = _Problem(tmpl, scaled, stack, cfg)
    # with x in scene units the operator absorbs xscale / dscale
    p.op.scale(xscale / dscale)
    x = np.zeros(p.op.volume_shape) if x0 is None else np.asarray(x0, dtype=np.float64) / xscale
    w = np.ones(p.op.image_shape) if w0 is None else np.array(w0, dtype=np.float64)
    opt_x = _Adam(x.shape, cfg.step_size, cfg.adam_betas, cfg.adam_eps)
    opt_w = _Adam(w.shape, cfg.step_size * cfg.weight_lr_ratio, cfg.adam_betas, cfg.adam_eps)
    trace = np.empty(cfg.iterations)
    for it in range(cfg.iterations):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gx, gw = p.gradients(x, w)
        trace[it] = loss
        if not np.isfinite(loss):
            raise DivergenceError(f"objective became non-finite at iteration {it}", trace[:it + 1])
        if cfg.nonneg and cfg.lambda_l1:
            # at the boundary the one-sided L1 subgradient is +lambda; stay put if that is a KKT point
            at0 = x <= 0
            gx[at0] = np.minimum(gx[at0] + cfg.lambda_l1, 0.0)
        x -= opt_x.step(gx)
        if cfg.nonneg:
            np.clip(x, 0, None, out=x)
        if estimate_weights:
            w -= opt_w.step(gw)
            np.clip(w, WEIGHT_FLOOR, None, out=w)
        if callback is not None:
            callback(it, loss * dscale**2)
    # report the loss in the caller's data units
    trace *= dscale**2
    vol = tmpl.with_values(x * xscale)
    return ReconResult(
        volume=vol,
        loss_trace=trace,
        converged=_converged(trace),
        weights=w if estimate_weights else None,
        config=cfg.to_dict(),
    )


def solve(meas: Measurement, stack: PsfStack, cfg: ReconConfig, like: Volume3D | None = None, x0=None,
          callback=None) -> ReconResult:
    """Adam reconstruction starting from zeros (or ``x0``, in scene units).

    ``like`` fixes the output geometry (z planes and pitch); by default the
    volume has one plane per stack plane. Non-negativity is enforced by
    clamping after every step. With ``cfg.estimate_weights`` this is the
    same as :func:`solve_with_weights`.
    """
    return _run(meas, stack, cfg, like, x0, estimate_weights=cfg.estimate_weights, callback=callback)


def solve_with_weights(meas: Measurement, stack: PsfStack, cfg: ReconConfig, like: Volume3D | None = None,
                       x0=None, callback=None) -> ReconResult:
    """Joint estimate of the scene and per-pixel, per-channel image weights.

    Weights start at one, multiply the predicted channel images, stay
    positive and learn at ``cfg.weight_lr_ratio`` times the scene rate.
    With ``cfg.estimate_weights`` false the weights stay fixed at one.
    """
    return _run(meas, stack, cfg, like, x0, estimate_weights=cfg.estimate_weights, callback=callback)
