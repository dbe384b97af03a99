"""Sensor array layouts and synthetic dynamic phantoms.

Phantoms are emitted directly in the source model the forward operator
integrates exactly: lattices of small Gaussian balls whose per-frame
attributes follow simple analytic schedules.  This keeps ground truth,
simulated data and reconstructions all in the same representation.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .core import Box, SensorArray, SignalSet, VoxelGrid, frame_times
from .deformation import CloudState
from .evaluation import GridSpec, voxelize
from .radiator import forward_frame

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


def fibonacci_sphere(m: int, radius: float) -> np.ndarray:
    """Near-uniform golden-angle lattice of m points on a sphere.

    Latitudes are z_i = 1 - (2i+1)/m and azimuths advance by the golden
    angle 2*pi*(1 - 1/phi).  Returns an (m, 3) array of positions in mm;
    all norms equal `radius` up to rounding.
    """
    if m < 1:
        raise ValueError("sensor count m must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    i = np.arange(m, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / m
    phi = 2.0 * np.pi * i * (1.0 - 1.0 / GOLDEN_RATIO)
    s = np.sqrt(1.0 - z * z)
    return radius * np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def spherical_array(m: int, radius: float, sound_speed: float = 1.5,
                    sample_rate: float = 10.0, n_samples: int = 2,
                    t_start: float = 0.0) -> SensorArray:
    """SensorArray on a Fibonacci sphere with the nominal radius recorded."""
    return SensorArray(fibonacci_sphere(m, radius), sound_speed, sample_rate,
                       n_samples, t_start, radius=radius)


def pulsation_schedule(n_frames: int, amplitude: float) -> np.ndarray:
    """Periodic scale factors 1 + A*sin(2*pi*t_k) over the normalized clip."""
    return 1.0 + amplitude * np.sin(2.0 * np.pi * frame_times(n_frames))


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic dynamic scene.

    ``kind`` selects the generator: "heart" builds three static mutually
    perpendicular slabs around a pulsating Gaussian ellipsoid; "vascular"
    grows a random branching tube tree that dilates and brightens over the
    clip; "custom" takes explicit balls (rows of ``custom_balls`` are
    ``(p0, a0, x, y, z)``) with the pulsation schedule applied to p0.

    All lengths in mm; `pitch` is the rasterization lattice pitch and the
    emitted balls carry a0 = pitch/2.
    """

    kind: str
    region: Box
    n_frames: int = 8
    pitch: float = 1.6
    amplitude: float = 1.0
    voxel_pitch: float = 0.4
    # heart parameters
    slab_side: float = 9.6
    slab_thickness: float = 1.6
    slab_offset: float = 6.4
    ellipsoid_axes: tuple[float, float, float] = (2.4, 1.8, 1.8)
    pulsation: float = 0.3
    # vascular parameters
    tree_depth: int = 4
    trunk_radius: float = 1.0
    trunk_length: float = 9.0
    dilation: float = 0.25
    brightening: float = 0.5
    seed: int = 0
    # custom parameters
    custom_balls: tuple = ()

    def __post_init__(self):
        if self.kind not in ("heart", "vascular", "custom"):
            raise ValueError("kind must be 'heart', 'vascular' or 'custom'")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if not (self.pitch > 0 and self.voxel_pitch > 0):
            raise ValueError("pitch and voxel_pitch must be > 0")
        if np.any(self.region.size <= 0):
            raise ValueError("region must be nonempty")


@dataclass
class Phantom:
    """Ground truth: per-frame ball attributes plus rasterized voxel grids."""

    frames: list[CloudState]
    grids: list[VoxelGrid]
    frame_times: np.ndarray
    spec: PhantomSpec

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_balls(self) -> int:
        return len(self.frames[0]) if self.frames else 0

    def max_a0(self) -> float:
        return max(float(np.max(f.a0_t)) for f in self.frames) if self.frames else 0.0


def _lattice_1d(lo: float, hi: float, pitch: float) -> np.ndarray:
    """Lattice coordinates centered in [lo, hi] with the given pitch."""
    n = max(1, int(np.floor((hi - lo) / pitch + 1e-12)))
    width = (n - 1) * pitch
    start = 0.5 * (lo + hi) - 0.5 * width
    return start + pitch * np.arange(n)


def box_lattice(box: Box, pitch: float) -> np.ndarray:
    axes = [_lattice_1d(box.lo[i], box.hi[i], pitch) for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([a.ravel() for a in g])


def _require_inside(region: Box, points: np.ndarray, what: str,
                    margin: float = 0.0):
    shrunk = Box(region.lo + margin, region.hi - margin)
    if not np.all(shrunk.contains(points)):
        raise ValueError(f"{what} exceeds the phantom region")


def _heart_frames(spec: PhantomSpec) -> list[CloudState]:
    half = spec.slab_side / 2.0
    th = spec.slab_thickness / 2.0
    off = spec.slab_offset
    boxes = [
        Box((-half, -half, -off - th), (half, half, -off + th)),
        Box((-half, -off - th, -half), (half, -off + th, half)),
        Box((-off - th, -half, -half), (-off + th, half, half)),
    ]
    slab_mu = np.vstack([box_lattice(b, spec.pitch) for b in boxes])
    a0 = spec.pitch / 2.0
    _require_inside(spec.region, slab_mu, "slab lattice", margin=3.0 * a0)
    slab_p0 = np.full(len(slab_mu), spec.amplitude)

    ax = np.asarray(spec.ellipsoid_axes, dtype=np.float64)
    if np.any(ax <= 0):
        raise ValueError("ellipsoid axes must be > 0")
    ell_box = Box(-2.5 * ax, 2.5 * ax)
    cand = box_lattice(ell_box, spec.pitch)
    q = np.sum((cand / ax) ** 2, axis=1)
    ell_mu = cand[q <= 2.5 ** 2]
    ell_p0 = spec.amplitude * np.exp(-0.5 * q[q <= 2.5 ** 2])
    smax = 1.0 + abs(spec.pulsation)
    _require_inside(spec.region, ell_mu * smax, "ellipsoid lattice",
                    margin=3.0 * a0 * smax)

    schedule = pulsation_schedule(spec.n_frames, spec.pulsation)
    frames = []
    for s in schedule:
        mu = np.vstack([slab_mu, ell_mu * s])
        p0 = np.concatenate([slab_p0, ell_p0 * s])
        a0s = np.concatenate([np.full(len(slab_mu), a0),
                              np.full(len(ell_mu), a0 * s)])
        frames.append(CloudState(a0s, p0, mu))
    return frames


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _vascular_frames(spec: PhantomSpec) -> list[CloudState]:
    rng = np.random.default_rng(spec.seed)
    region = spec.region
    margin = 4.0 * spec.trunk_radius
    inner = Box(region.lo + margin, region.hi - margin)

    segments = []   # (start, end, radius)
    start = inner.center - np.array([0.0, 0.0, 0.45 * inner.size[2]])
    heading = np.array([0.0, 0.0, 1.0])
    stack = [(start, heading, spec.trunk_length, spec.trunk_radius, 0)]
    while stack:
        origin, direction, length, radius, depth = stack.pop()
        end = origin + direction * length
        # Reflect against the inner box so the tree stays inside the region.
        for i in range(3):
            if end[i] < inner.lo[i]:
                end[i] = 2.0 * inner.lo[i] - end[i]
            elif end[i] > inner.hi[i]:
                end[i] = 2.0 * inner.hi[i] - end[i]
        end = np.clip(end, inner.lo, inner.hi)
        segments.append((origin.copy(), end.copy(), radius))
        if depth + 1 >= spec.tree_depth:
            continue
        new_dir = _unit(end - origin) if np.any(end != origin) else direction
        for _ in range(2):
            tilt = rng.uniform(0.4, 0.9)
            azim = rng.uniform(0.0, 2.0 * np.pi)
            perp = _unit(np.cross(new_dir, rng.normal(size=3)))
            child = _unit(np.cos(tilt) * new_dir
                          + np.sin(tilt) * (np.cos(azim) * perp
                                            + np.sin(azim)
                                            * np.cross(new_dir, perp)))
            # Murray's law: radius drops by 2^(-1/3) at each bifurcation.
            stack.append((end, child, 0.75 * length,
                          radius * 2.0 ** (-1.0 / 3.0), depth + 1))

    mus, a0s = [], []
    for origin, end, radius in segments:
        length = np.linalg.norm(end - origin)
        n = max(2, int(np.ceil(length / radius)) + 1)
        for f in np.linspace(0.0, 1.0, n):
            mus.append(origin + f * (end - origin))
            a0s.append(radius)
    mu = np.array(mus)
    a0 = np.array(a0s)
    _require_inside(region, mu, "vascular tree", margin=0.0)
    p0 = np.full(len(mu), spec.amplitude)

    times = frame_times(spec.n_frames)
    frames = []
    for t in times:
        frames.append(CloudState(a0 * (1.0 + spec.dilation * t),
                                 p0 * (1.0 + spec.brightening * t),
                                 mu.copy()))
    return frames


def _custom_frames(spec: PhantomSpec) -> list[CloudState]:
    rows = np.asarray(spec.custom_balls, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 5:
        raise ValueError("custom_balls must be rows of (p0, a0, x, y, z)")
    p0, a0, mu = rows[:, 0], rows[:, 1], rows[:, 2:5]
    _require_inside(spec.region, mu, "custom balls")
    schedule = pulsation_schedule(spec.n_frames, spec.pulsation)
    return [CloudState(a0.copy(), p0 * s, mu.copy()) for s in schedule]


def build_phantom(spec: PhantomSpec) -> Phantom:
    """Generate the per-frame ground-truth clouds and their voxel grids.

    Deterministic for a fixed spec (the vascular generator is seeded).
    """
    if spec.kind == "heart":
        frames = _heart_frames(spec)
    elif spec.kind == "vascular":
        frames = _vascular_frames(spec)
    else:
        frames = _custom_frames(spec)
    gspec = GridSpec.from_box(spec.region, spec.voxel_pitch)
    grids = [voxelize(f, gspec) for f in frames]
    return Phantom(frames, grids, frame_times(spec.n_frames), spec)


def simulate_dataset(frames, array: SensorArray, noise_std: float = 0.0,
                     seed: int = 0, support_sigmas: float = 6.0,
                     exact: bool = False) -> SignalSet:
    """Forward-simulate every frame and optionally add white noise.

    `frames` is a Phantom or a list of per-frame CloudState; the returned
    SignalSet has shape (M, K, T) with frame_times k/(K-1).
    """
    if isinstance(frames, Phantom):
        frames = frames.frames
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    data = np.zeros((array.n_sensors, len(frames), array.n_samples))
    for k, state in enumerate(frames):
        data[:, k, :] = forward_frame(state, array, support_sigmas, exact)
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, noise_std, size=data.shape)
    return SignalSet(data, frame_times(len(frames)))
