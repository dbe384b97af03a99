"""Voxelization, maximum-amplitude projections and SSIM scoring."""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from numba import njit, prange

from .core import Box, VoxelGrid
from .deformation import CloudState

MAP_AXES = ("XY", "YZ", "XZ")
# Axis dropped by each projection (x=0, y=1, z=2).
_DROP = {"XY": 2, "YZ": 0, "XZ": 1}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid; `origin` is the center of voxel (0, 0, 0)."""

    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if self.origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")

    @classmethod
    def from_box(cls, box: Box, spacing: float) -> "GridSpec":
        dims = tuple(max(1, int(np.round(s / spacing))) for s in box.size)
        origin = box.lo + 0.5 * spacing
        return cls(origin, spacing, dims)


@njit(parallel=True, cache=True)
def _splat_balls(mu, a0, p0, ox, oy, oz, sp, nx, ny, nz, support, exact, out):
    n_balls = mu.shape[0]
    for ix in prange(nx):
        x = ox + ix * sp
        for b in range(n_balls):
            reach = support * a0[b]
            if not exact and abs(x - mu[b, 0]) > reach:
                continue
            if exact:
                ylo, yhi = 0, ny
                zlo, zhi = 0, nz
            else:
                ylo = max(0, int(np.ceil((mu[b, 1] - reach - oy) / sp)))
                yhi = min(ny, int(np.floor((mu[b, 1] + reach - oy) / sp)) + 1)
                zlo = max(0, int(np.ceil((mu[b, 2] - reach - oz) / sp)))
                zhi = min(nz, int(np.floor((mu[b, 2] + reach - oz) / sp)) + 1)
            inv2a2 = 1.0 / (2.0 * a0[b] * a0[b])
            dx2 = (x - mu[b, 0]) * (x - mu[b, 0])
            for iy in range(ylo, yhi):
                y = oy + iy * sp
                dy2 = (y - mu[b, 1]) * (y - mu[b, 1])
                for iz in range(zlo, zhi):
                    z = oz + iz * sp
                    dz2 = (z - mu[b, 2]) * (z - mu[b, 2])
                    out[ix, iy, iz] += p0[b] * np.exp(
                        -(dx2 + dy2 + dz2) * inv2a2)


def voxelize(states, spec: GridSpec, support_sigmas: float = 6.0,
             exact: bool = False) -> VoxelGrid:
    """Sample the cloud's Gaussian field on a regular grid.

    V(x) = sum_b p0_b * exp(-|x - mu_b|^2 / (2 a0_b^2)) at voxel centers.
    The fast path truncates each ball at `support_sigmas` standard
    deviations; `exact=True` evaluates every (ball, voxel) pair.
    """
    if isinstance(states, (list, tuple)):
        states = CloudState.from_states(states)
    out = np.zeros(spec.dims)
    if len(states):
        if np.any(states.a0_t <= 0):
            raise ValueError("all a0_t must be > 0")
        _splat_balls(states.mu_t, states.a0_t, states.p0_t,
                     spec.origin[0], spec.origin[1], spec.origin[2],
                     spec.spacing, spec.dims[0], spec.dims[1], spec.dims[2],
                     support_sigmas, exact, out)
    return VoxelGrid(spec.origin, spec.spacing, spec.dims, out)


@dataclass(frozen=True)
class MapImage:
    """Maximum-amplitude projection of a voxel grid along one axis."""

    values: np.ndarray
    axis: str
    pitch: float

    def __post_init__(self):
        if self.axis not in MAP_AXES:
            raise ValueError(f"axis must be one of {MAP_AXES}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("map image values must be 2-d")
        object.__setattr__(self, "values", v)


def map_project(grid: VoxelGrid, axis: str) -> MapImage:
    """Per-pixel maximum of the grid along the dropped axis."""
    if axis not in MAP_AXES:
        raise ValueError(f"axis must be one of {MAP_AXES}")
    return MapImage(np.max(grid.values, axis=_DROP[axis]), axis, grid.spacing)


def _image_values(x) -> np.ndarray:
    return x.values if isinstance(x, MapImage) else np.asarray(x, np.float64)


def normalize_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Scale two images by their joint maximum so both peak at <= 1.

    The joint-max convention makes the downstream SSIM invariant to a
    common positive rescaling of both inputs.  All-nonpositive pairs are
    returned unchanged.
    """
    av, bv = _image_values(a), _image_values(b)
    peak = max(float(np.max(av)), float(np.max(bv)))
    if peak <= 0:
        return av, bv
    return av / peak, bv / peak


def gaussian_window(size: int = SSIM_WINDOW,
                    sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-d Gaussian weighting window."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / np.sum(w)


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view
    w = sliding_window_view(img, kernel.shape)
    return np.tensordot(w, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local structural similarity between two equally sized images.

    Uses the standard 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
    K2 = 0.03 and statistics over fully contained windows only.  Inputs are
    expected on a [0, 1] scale (see `normalize_pair`); the result lies in
    [-1, 1] with ssim(x, x) == 1.
    """
    av, bv = _image_values(a), _image_values(b)
    if av.shape != bv.shape:
        raise ValueError(f"image shapes differ: {av.shape} vs {bv.shape}")
    if min(av.shape) < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW} pixels per side")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _windowed(av, w)
    mu_b = _windowed(bv, w)
    var_a = _windowed(av * av, w) - mu_a * mu_a
    var_b = _windowed(bv * bv, w) - mu_b * mu_b
    cov = _windowed(av * bv, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def eval_report(recon_grids, truth_grids, ubp_grids=None) -> list[dict]:
    """Per-frame, per-axis SSIM of reconstructions against ground truth.

    Every entry is ``{"frame": k, "axis": ax, "method": name, "ssim": v}``
    with methods "4d" and, when `ubp_grids` is given, "ubp".  MAP images of
    each pair are normalized by their joint maximum before scoring.
    """
    recon_grids = list(recon_grids)
    truth_grids = list(truth_grids)
    if len(recon_grids) != len(truth_grids):
        raise ValueError("frame counts of recon and truth differ")
    methods = {"4d": recon_grids}
    if ubp_grids is not None:
        ubp_grids = list(ubp_grids)
        if len(ubp_grids) != len(truth_grids):
            raise ValueError("frame counts of ubp and truth differ")
        methods["ubp"] = ubp_grids
    records = []
    for k, truth in enumerate(truth_grids):
        for axis in MAP_AXES:
            t_map = map_project(truth, axis)
            for name, grids in methods.items():
                r_map = map_project(grids[k], axis)
                rn, tn = normalize_pair(r_map, t_map)
                records.append({"frame": k, "axis": axis, "method": name,
                                "ssim": ssim(rn, tn)})
    return records


def format_report(records) -> str:
    """Aligned text table of an eval_report result."""
    methods = sorted({r["method"] for r in records})
    frames = sorted({r["frame"] for r in records})
    by_key = {(r["frame"], r["axis"], r["method"]): r["ssim"] for r in records}
    cols = [f"{m}/{ax}" for m in methods for ax in MAP_AXES]
    lines = ["frame  " + "  ".join(f"{c:>10s}" for c in cols)]
    for k in frames:
        vals = [by_key[(k, ax, m)] for m in methods for ax in MAP_AXES]
        lines.append(f"{k:5d}  " + "  ".join(f"{v:10.4f}" for v in vals))
    return "\n".join(lines)
