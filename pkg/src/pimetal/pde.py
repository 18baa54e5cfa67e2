"""2-D periodic convection-diffusion solver used to synthesize task families.

du/dt = sign * (a, b) . grad(u) + D * lap(u) on [0, 2pi)^2, integrated with
classical RK4 and second-order central differences. Auxiliary derivative
labels use fourth-order central differences.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SOLVER_TAG = "FD-solver"
GRID_FORMAT_VERSION = 1
TWO_PI = 2.0 * np.pi

# Extents of the RK4 stability region on the negative real and imaginary axes.
RK4_REAL_EXTENT = 2.785
RK4_IMAG_EXTENT = 2.828


class StabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class PdeConfig:
    lam: float = 1.0
    diff_coeff: float = 0.2
    fourier_cutoff: int = 9
    coeff_scale: float = 0.02
    coeff_is_variance: bool = False
    grid_n: int = 100
    dt_solver: float = 5e-3
    dt_save: float = 0.01
    n_frames: int = 20
    seed: int = 0
    convection_sign: float = 1.0
    cfl_safety: float = 0.9

    def __post_init__(self):
        if self.grid_n < 16:
            raise ValueError(f"grid_n must be >= 16, got {self.grid_n}")
        if not self.dt_solver > 0:
            raise ValueError("dt_solver must be positive")
        if self.fourier_cutoff < 0 or self.diff_coeff < 0:
            raise ValueError("fourier_cutoff and diff_coeff must be non-negative")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.convection_sign not in (1.0, -1.0):
            raise ValueError("convection_sign must be +1 or -1")
        self.substeps  # validates dt_save / dt_solver

    @property
    def h(self) -> float:
        return TWO_PI / self.grid_n

    @property
    def substeps(self) -> int:
        ratio = self.dt_save / self.dt_solver
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"dt_save={self.dt_save} is not an integer multiple of dt_solver={self.dt_solver}")
        return n

    @property
    def coeff_std(self) -> float:
        return float(np.sqrt(self.coeff_scale)) if self.coeff_is_variance else float(self.coeff_scale)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FourierCoefficients:
    """Coefficient draws indexed [k + F, l + F]."""

    cutoff: int
    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray


@dataclass
class GridField:
    frames: np.ndarray  # [T, n, n], axis 1 is x, axis 2 is y
    derivs: np.ndarray  # [T, 4, n, n]: u_x, u_y, u_xx, u_yy
    x: np.ndarray  # [n, n]
    y: np.ndarray  # [n, n]
    dt_save: float
    config: PdeConfig | None = None
    solver: str = SOLVER_TAG

    @property
    def grid_n(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def grid_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.arange(n) * (TWO_PI / n)
    return np.meshgrid(axis, axis, indexing="ij")


def draw_coefficients(cfg: PdeConfig, rng: np.random.Generator) -> FourierCoefficients:
    size = 2 * cfg.fourier_cutoff + 1
    draws = rng.normal(0.0, 1.0, size=(2, size, size)) * cfg.coeff_std
    return FourierCoefficients(cfg.fourier_cutoff, draws[0], draws[1])


def evaluate_fourier(coeffs: FourierCoefficients, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum of lam_kl cos(kx + ly) + gam_kl sin(kx + ly) over |k|, |l| <= F on a tensor grid."""
    F = coeffs.cutoff
    ks = np.arange(-F, F + 1, dtype=float)
    xs, ys = x[:, 0], y[0, :]
    cx, sx = np.cos(np.outer(ks, xs)), np.sin(np.outer(ks, xs))
    cy, sy = np.cos(np.outer(ks, ys)), np.sin(np.outer(ks, ys))
    lam, gam = coeffs.cos_coeffs, coeffs.sin_coeffs
    # cos(a+b) = cos a cos b - sin a sin b ; sin(a+b) = sin a cos b + cos a sin b
    return (cx.T @ lam @ cy - sx.T @ lam @ sy) + (sx.T @ gam @ cy + cx.T @ gam @ sy)


def fourier_initial_condition(cfg: PdeConfig, rng: np.random.Generator | None = None):
    """Random initial condition. Returns ``(u0, coefficients)``."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    coeffs = draw_coefficients(cfg, rng)
    x, y = grid_coords(cfg.grid_n)
    return evaluate_fourier(coeffs, x, y), coeffs


def velocity_field(cfg: PdeConfig, x: np.ndarray, y: np.ndarray):
    """Per-cell (a, b, c) for the synthetic family."""
    lam = cfg.lam
    a = 0.5 * lam * (np.cos(y) + x * (TWO_PI - x) * np.sin(x)) + 0.6
    b = 2.0 * lam * (np.cos(y) + np.sin(x)) + 0.8
    c = np.full_like(np.asarray(x, dtype=float), cfg.diff_coeff)
    return a, b, c


def max_stable_dt(vel, h: float, safety: float) -> float:
    a, b, c = vel
    limits = []
    d_max = float(np.max(c))
    if d_max > 0:
        limits.append(RK4_REAL_EXTENT * h * h / (8.0 * d_max))
    speed = float(np.max(np.abs(a)) + np.max(np.abs(b)))
    if speed > 0:
        limits.append(RK4_IMAG_EXTENT * h / speed)
    return safety * min(limits) if limits else np.inf


def _rhs(u: np.ndarray, vel, h: float, sign: float) -> np.ndarray:
    a, b, c = vel
    up_x, dn_x = np.roll(u, -1, axis=0), np.roll(u, 1, axis=0)
    up_y, dn_y = np.roll(u, -1, axis=1), np.roll(u, 1, axis=1)
    u_x = (up_x - dn_x) / (2.0 * h)
    u_y = (up_y - dn_y) / (2.0 * h)
    lap = ((up_x + dn_x - 2.0 * u) + (up_y + dn_y - 2.0 * u)) / (h * h)
    return sign * (a * u_x + b * u_y) + c * lap


def step(u: np.ndarray, vel, cfg: PdeConfig) -> np.ndarray:
    """Advance one RK4 step of size ``cfg.dt_solver``."""
    dt, h = cfg.dt_solver, cfg.h
    limit = max_stable_dt(vel, h, cfg.cfl_safety)
    if dt > limit:
        raise StabilityError(f"dt_solver={dt} exceeds the maximum admissible dt={limit:.6g}")
    if not np.isfinite(u).all():
        raise StabilityError("non-finite input field")
    s = cfg.convection_sign
    k1 = _rhs(u, vel, h, s)
    k2 = _rhs(u + 0.5 * dt * k1, vel, h, s)
    k3 = _rhs(u + 0.5 * dt * k2, vel, h, s)
    k4 = _rhs(u + dt * k3, vel, h, s)
    out = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(out).all():
        raise StabilityError("solver produced non-finite values")
    return out


def compute_grid_derivatives(u: np.ndarray, h: float):
    """Fourth-order periodic central differences: (u_x, u_y, u_xx, u_yy)."""
    out = []
    for axis in (0, 1):
        p1, m1 = np.roll(u, -1, axis), np.roll(u, 1, axis)
        p2, m2 = np.roll(u, -2, axis), np.roll(u, 2, axis)
        first = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        second = (16.0 * (p1 + m1) - (p2 + m2) - 30.0 * u) / (12.0 * h * h)
        out.append((first, second))
    (u_x, u_xx), (u_y, u_yy) = out
    return u_x, u_y, u_xx, u_yy


def simulate(cfg: PdeConfig, u0: np.ndarray | None = None, velocity=None) -> GridField:
    """Run the solver and save ``cfg.n_frames`` frames every ``cfg.dt_save``."""
    x, y = grid_coords(cfg.grid_n)
    if u0 is None:
        u0, _ = fourier_initial_condition(cfg, np.random.default_rng(cfg.seed))
    vel = velocity_field(cfg, x, y) if velocity is None else velocity
    u = np.array(u0, dtype=float)
    frames = [u.copy()]
    for _ in range(cfg.n_frames - 1):
        for _ in range(cfg.substeps):
            u = step(u, vel, cfg)
        frames.append(u.copy())
    frames = np.stack(frames)
    derivs = np.stack([np.stack(compute_grid_derivatives(f, cfg.h)) for f in frames])
    return GridField(frames, derivs, x, y, cfg.dt_save, cfg)


def save_grid_field(field: GridField, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": GRID_FORMAT_VERSION,
        "solver": field.solver,
        "grid_n": field.grid_n,
        "n_frames": field.n_frames,
        "dt_save": field.dt_save,
        "config": field.config.to_dict() if field.config else None,
        "layout": "frame_XXXX.bin: float64 little-endian [5][n][n] = u, u_x, u_y, u_xx, u_yy; axis 1 is x",
    }
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for t in range(field.n_frames):
        block = np.concatenate([field.frames[t][None], field.derivs[t]], axis=0)
        (directory / f"frame_{t:04d}.bin").write_bytes(np.ascontiguousarray(block, dtype="<f8").tobytes())
    return directory


def load_grid_field(directory: str | Path) -> GridField:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text())
    if meta["format_version"] != GRID_FORMAT_VERSION:
        raise ValueError(f"unsupported grid format version {meta['format_version']}")
    n, T = meta["grid_n"], meta["n_frames"]
    blocks = [np.frombuffer((directory / f"frame_{t:04d}.bin").read_bytes(), dtype="<f8").reshape(5, n, n)
              for t in range(T)]
    data = np.stack(blocks).astype(float)
    cfg = PdeConfig(**meta["config"]) if meta["config"] else None
    x, y = grid_coords(n)
    return GridField(data[:, 0], data[:, 1:], x, y, meta["dt_save"], cfg, meta["solver"])
