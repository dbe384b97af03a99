"""Shared domain types for the dynamic photoacoustic reconstruction pipeline.

Conventions used throughout the package:

* lengths in mm, time in microseconds, sound speed in mm/us
* pressures in arbitrary linear units
* deformation channel order is fixed as ``(a0, p0, mu_x, mu_y, mu_z)``
  (indices 0..4); every array with a channel axis follows it
* normalized frame time t lives in [0, 1]
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field

# Fixed order of the deformable attribute channels.
CHANNELS = ("a0", "p0", "mu_x", "mu_y", "mu_z")
N_CHANNELS = len(CHANNELS)

# Ways the position channels may enter the deformed center; "multiplicative"
# is mu_i*(1+H_i), "additive" is mu_i + H_i (H in mm), "radial" applies the
# mu_x channel as a single shared scale mu*(1+H).
COORD_MODES = ("multiplicative", "additive", "radial")


def _as_vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, used for regions of interest and phantom extents."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _as_vec3(self.lo, "lo"))
        object.__setattr__(self, "hi", _as_vec3(self.hi, "hi"))
        if np.any(self.hi < self.lo):
            raise ValueError("box hi must be >= lo on every axis")

    @classmethod
    def cube(cls, half_extent: float, center=(0.0, 0.0, 0.0)) -> "Box":
        c = _as_vec3(center, "center")
        h = float(half_extent)
        return cls(c - h, c + h)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def circumradius(self, about=(0.0, 0.0, 0.0)) -> float:
        """Largest distance from `about` to any corner of the box."""
        o = _as_vec3(about, "about")
        corners = np.array([[self.lo[i] if (k >> i) & 1 == 0 else self.hi[i]
                             for i in range(3)] for k in range(8)])
        return float(np.max(np.linalg.norm(corners - o, axis=1)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Inclusive containment test for an (n, 3) array of points."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)


@dataclass(frozen=True)
class GaussBall:
    """One spherical Gaussian source.

    Parameters
    ----------
    p0 : float
        Peak initial pressure (>= 0, arbitrary linear units).
    a0 : float
        Standard deviation of the Gaussian profile in mm (> 0).
    mu : array-like, shape (3,)
        Center position in mm.
    """

    p0: float
    a0: float
    mu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p0", float(self.p0))
        object.__setattr__(self, "a0", float(self.a0))
        object.__setattr__(self, "mu", _as_vec3(self.mu, "mu"))
        if not self.a0 > 0:
            raise ValueError(f"a0 must be > 0, got {self.a0}")
        if self.p0 < 0:
            raise ValueError(f"p0 must be >= 0, got {self.p0}")
        if not (np.isfinite(self.p0) and np.isfinite(self.a0)
                and np.all(np.isfinite(self.mu))):
            raise ValueError("ball attributes must be finite")


@dataclass(frozen=True)
class DeformField:
    """Gaussian-basis temporal deformation curves for one ball.

    ``theta`` (basis centers in normalized time) and ``sigma`` (basis widths)
    are shared across the five channels when given as shape (N,), or
    per-channel when given as shape (5, N).  ``omega`` always has one weight
    row per channel in the fixed order ``CHANNELS``.
    """

    theta: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        omega = np.asarray(self.omega, dtype=np.float64)
        if theta.ndim not in (1, 2) or theta.shape != sigma.shape:
            raise ValueError("theta and sigma must share shape (N,) or (5, N)")
        if theta.ndim == 2 and theta.shape[0] != N_CHANNELS:
            raise ValueError(f"per-channel theta must have {N_CHANNELS} rows")
        n = theta.shape[-1]
        if omega.shape != (N_CHANNELS, n):
            raise ValueError(
                f"omega must have shape ({N_CHANNELS}, {n}), got {omega.shape}")
        if np.any(sigma <= 0):
            raise ValueError("all basis widths sigma must be > 0")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "omega", omega)

    @property
    def n_basis(self) -> int:
        return self.theta.shape[-1]

    @property
    def shared_basis(self) -> bool:
        return self.theta.ndim == 1

    @classmethod
    def identity(cls, n_basis: int) -> "DeformField":
        """Zero-weight field over an even theta grid: H(t) == 0 for all t."""
        theta, sigma = default_basis_grid(n_basis)
        return cls(theta, sigma, np.zeros((N_CHANNELS, n_basis)))


def default_basis_grid(n_basis: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced basis centers on [0, 1] with two-grid-spacing widths.

    n_basis == 1 degenerates to a single flat basis at t = 0.5.
    """
    if n_basis < 1:
        raise ValueError("n_basis must be >= 1")
    if n_basis == 1:
        return np.array([0.5]), np.array([1.0])
    theta = np.arange(n_basis, dtype=np.float64) / (n_basis - 1)
    sigma = np.full(n_basis, 2.0 / (n_basis - 1))
    return theta, sigma


class DynamicCloud:
    """A point cloud of Gaussian balls with per-ball deformation fields.

    Internally stored as packed arrays (structure-of-arrays) because the
    optimizer and forward model operate on whole clouds; ``balls`` and
    ``deforms`` materialize the per-ball view.  Instances are treated as
    immutable after construction: training code copies the arrays into its
    own parameter buffers and builds a fresh cloud at the end.

    Attributes
    ----------
    p0, a0 : ndarray, shape (B,)
    mu : ndarray, shape (B, 3)
    theta, sigma : ndarray, shape (B, N) or (B, 5, N)
    omega : ndarray, shape (B, 5, N)
    """

    def __init__(self, p0, a0, mu, theta, sigma, omega):
        self.p0 = np.ascontiguousarray(p0, dtype=np.float64)
        self.a0 = np.ascontiguousarray(a0, dtype=np.float64)
        self.mu = np.ascontiguousarray(mu, dtype=np.float64)
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        self.sigma = np.ascontiguousarray(sigma, dtype=np.float64)
        self.omega = np.ascontiguousarray(omega, dtype=np.float64)
        b = self.p0.shape[0]
        if self.a0.shape != (b,) or self.mu.shape != (b, 3):
            raise ValueError("p0 (B,), a0 (B,) and mu (B, 3) must align")
        if self.theta.shape != self.sigma.shape:
            raise ValueError("theta and sigma must share a shape")
        n = self.theta.shape[-1]
        if self.theta.shape not in ((b, n), (b, N_CHANNELS, n)):
            raise ValueError("theta must be (B, N) or (B, 5, N)")
        if self.omega.shape != (b, N_CHANNELS, n):
            raise ValueError(
                f"omega must be (B, {N_CHANNELS}, N), got {self.omega.shape}")

    def __len__(self) -> int:
        return self.p0.shape[0]

    @property
    def n_basis(self) -> int:
        return self.theta.shape[-1]

    @property
    def shared_basis(self) -> bool:
        return self.theta.ndim == 2

    @property
    def balls(self) -> list[GaussBall]:
        return [GaussBall(self.p0[i], self.a0[i], self.mu[i])
                for i in range(len(self))]

    @property
    def deforms(self) -> list[DeformField]:
        return [DeformField(self.theta[i], self.sigma[i], self.omega[i])
                for i in range(len(self))]

    @classmethod
    def from_balls(cls, balls, deforms=None, n_basis: int = 1) -> "DynamicCloud":
        """Pack per-ball objects; identity deformations when none are given."""
        balls = list(balls)
        if deforms is None:
            deforms = [DeformField.identity(n_basis) for _ in balls]
        deforms = list(deforms)
        if len(balls) != len(deforms):
            raise ValueError(
                f"{len(balls)} balls but {len(deforms)} deformation fields")
        if not balls:
            th, sg = default_basis_grid(n_basis)
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 3)),
                       np.zeros((0,) + th.shape), np.zeros((0,) + sg.shape),
                       np.zeros((0, N_CHANNELS, n_basis)))
        shapes = {d.theta.shape for d in deforms}
        if len(shapes) != 1:
            raise ValueError("all deformation fields must share a basis shape")
        return cls(
            np.array([b.p0 for b in balls]),
            np.array([b.a0 for b in balls]),
            np.array([b.mu for b in balls]),
            np.stack([d.theta for d in deforms]),
            np.stack([d.sigma for d in deforms]),
            np.stack([d.omega for d in deforms]),
        )

    @classmethod
    def static(cls, p0, a0, mu, n_basis: int = 1) -> "DynamicCloud":
        """Cloud with identity deformation attached to given baseline arrays."""
        p0 = np.asarray(p0, dtype=np.float64)
        b = p0.shape[0]
        th, sg = default_basis_grid(n_basis)
        return cls(p0, a0, mu,
                   np.broadcast_to(th, (b, n_basis)).copy(),
                   np.broadcast_to(sg, (b, n_basis)).copy(),
                   np.zeros((b, N_CHANNELS, n_basis)))


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by `validate_cloud`."""

    index: int
    field: str
    message: str


def validate_cloud(cloud: DynamicCloud, roi: Box) -> list[Violation]:
    """Diagnostic scan of a cloud against the type invariants and an ROI.

    Returns an empty list iff every ball has a0 > 0 and p0 >= 0, every basis
    width is positive, and every baseline center lies inside `roi`
    (inclusive).  Never raises; intended for post-hoc checks on optimizer
    output.
    """
    out: list[Violation] = []
    inside = roi.contains(cloud.mu) if len(cloud) else np.zeros(0, bool)
    for i in range(len(cloud)):
        if not cloud.a0[i] > 0:
            out.append(Violation(i, "a0", f"a0 = {cloud.a0[i]} is not > 0"))
        if cloud.p0[i] < 0:
            out.append(Violation(i, "p0", f"p0 = {cloud.p0[i]} is negative"))
        if np.any(cloud.sigma[i] <= 0):
            out.append(Violation(i, "sigma", "basis width <= 0"))
        if not inside[i]:
            out.append(Violation(
                i, "mu", f"center {cloud.mu[i]} outside roi "
                         f"[{roi.lo}, {roi.hi}]"))
    return out


@dataclass(frozen=True)
class SensorArray:
    """Detector positions plus acoustic and sampling parameters.

    Parameters
    ----------
    positions : ndarray, shape (M, 3)
        Detector centers in mm.
    sound_speed : float
        Acoustic speed in mm/us.
    sample_rate : float
        Samples per microsecond.
    n_samples : int
        Samples per trace (>= 2).
    t_start : float
        Acquisition start time in us.
    radius : float or None
        Nominal sphere radius; when set, all positions must sit on that
        sphere to 1e-9 relative tolerance.
    """

    positions: np.ndarray
    sound_speed: float = 1.5
    sample_rate: float = 10.0
    n_samples: int = 2
    t_start: float = 0.0
    radius: float | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be (M, 3), got {pos.shape}")
        object.__setattr__(self, "positions", pos)
        if not self.sound_speed > 0:
            raise ValueError("sound_speed must be > 0")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be > 0")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.radius is not None:
            r = np.linalg.norm(pos, axis=1)
            if np.max(np.abs(r - self.radius)) > 1e-9 * self.radius:
                raise ValueError(
                    "positions deviate from the nominal sphere radius by more "
                    "than 1e-9 relative")

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def sample_times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_samples) / self.sample_rate

    def with_window(self, t_start: float, n_samples: int) -> "SensorArray":
        return SensorArray(self.positions, self.sound_speed, self.sample_rate,
                           n_samples, t_start, self.radius)


def frame_times(n_frames: int) -> np.ndarray:
    """Normalized frame timestamps t_k = k/(K-1); [0.0] for a single frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames, dtype=np.float64) / (n_frames - 1)


@dataclass(frozen=True)
class SignalSet:
    """Per-sensor, per-frame pressure traces: data[m, k, j].

    ``frame_times`` must be strictly increasing and span [0, 1] whenever
    there are at least two frames.
    """

    data: np.ndarray
    frame_times: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        ft = np.ascontiguousarray(self.frame_times, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"data must be (M, K, T), got shape {data.shape}")
        if ft.shape != (data.shape[1],):
            raise ValueError("frame_times length must equal the frame axis")
        if len(ft) >= 2:
            if np.any(np.diff(ft) <= 0):
                raise ValueError("frame_times must be strictly increasing")
            if ft[0] != 0.0 or ft[-1] != 1.0:
                raise ValueError("frame_times must start at 0 and end at 1")
        elif len(ft) == 1 and ft[0] != 0.0:
            raise ValueError("a single frame must sit at t = 0")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_times", ft)

    @property
    def n_sensors(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    def frame(self, k: int) -> np.ndarray:
        return self.data[:, k, :]

    def validate_against(self, array: SensorArray) -> None:
        if self.n_sensors != array.n_sensors or self.n_samples != array.n_samples:
            raise ValueError(
                f"signal tensor ({self.n_sensors} sensors x {self.n_samples} "
                f"samples) does not match the array ({array.n_sensors} x "
                f"{array.n_samples})")


@dataclass(frozen=True)
class VoxelGrid:
    """Regular 3D scalar field; `origin` is the center of voxel (0, 0, 0)."""

    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))
        object.__setattr__(self, "spacing", float(self.spacing))
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != dims:
            if vals.size == int(np.prod(dims)):
                vals = vals.reshape(dims)
            else:
                raise ValueError(
                    f"values size {vals.size} != prod(dims) {np.prod(dims)}")
        object.__setattr__(self, "values", vals)
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if any(d < 1 for d in dims):
            raise ValueError("dims must all be >= 1")

    def voxel_centers_1d(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.dims[axis])


@dataclass(frozen=True)
class ReconConfig:
    """Hyperparameters of the two-stage reconstruction.

    Learning-rate defaults follow the published setup (coords 5e-7,
    pressure 5e-4, std 5e-7, deformation 5e-6 with step decay 160 / 0.1);
    at desk scale presets rescale them upward because signal magnitudes and
    the region of interest differ.
    """

    lr_coords: float = 5e-7
    lr_pressure: float = 5e-4
    lr_std: float = 5e-7
    lr_deform: float = 5e-6
    step_size: int = 160
    drop_rate: float = 0.1
    static_iters: int = 480
    dynamic_iters: int = 480
    prune_threshold: float = 1e-3
    prune_every: int = 40
    n_basis: int = 65
    a0_floor: float = 0.05
    sigma_floor: float = 1e-4
    p0_floor: float = 0.0
    init_pitch: float = 2.0
    init_p0_scale: float = 1e-3
    coord_mode: str = "multiplicative"
    optimizer: str = "adam"
    frame_batch: int = 0          # 0 = all frames per iteration
    reference_frame: int = 0      # -1 = seeded random choice
    support_sigmas: float = 6.0
    exact_forward: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_coords", "lr_pressure", "lr_std", "lr_deform"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.drop_rate <= 1:
            raise ValueError("drop_rate must be in (0, 1]")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")
        if self.coord_mode not in COORD_MODES:
            raise ValueError(f"coord_mode must be one of {COORD_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        for name in ("a0_floor", "sigma_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.p0_floor < 0:
            raise ValueError("p0_floor must be >= 0")
        if self.prune_every < 1 or self.static_iters < 1 or self.dynamic_iters < 1:
            raise ValueError("iteration counts and prune cadence must be >= 1")
