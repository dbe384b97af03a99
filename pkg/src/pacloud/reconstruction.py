"""Optimization engine: L2 fit of ball clouds to sensor data, plus UBP.

The two-stage pipeline first fits a static cloud to one reference frame
(lattice init, Adam, periodic pruning), then attaches identity deformation
fields and fits all frames jointly, updating baseline attributes and
deformation parameters together.  A universal back-projection baseline is
provided for comparison.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from numba import njit, prange

from .core import (Box, DynamicCloud, GaussBall, ReconConfig, SensorArray,
                   SignalSet, VoxelGrid, default_basis_grid, N_CHANNELS)
from .deformation import CloudState, cloud_state_grads, cloud_states_at
from .evaluation import GridSpec
from .radiator import CloudGrads, accumulate_frame_grads, forward_frame, \
    frame_state_grads

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def l2_loss(predicted: np.ndarray, observed: np.ndarray) -> float:
    """0.5 * sum of squared differences over all entries."""
    p = np.asarray(predicted, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    if p.shape != o.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {o.shape}")
    d = p - o
    return 0.5 * float(np.sum(d * d))


def scheduled_lr(lr0: float, iteration: int, step_size: int,
                 drop_rate: float) -> float:
    """Step-decay schedule lr0 * drop_rate ** floor(iteration / step_size)."""
    return lr0 * drop_rate ** (iteration // step_size)


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, group: str = "") -> None:
    """One in-place Adam update (beta1 0.9, beta2 0.999, eps 1e-8)."""
    if not np.all(np.isfinite(grad)):
        raise ValueError(f"non-finite gradient in parameter group '{group}'")
    state.t += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grad
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float,
             group: str = "") -> None:
    if not np.all(np.isfinite(grad)):
        raise ValueError(f"non-finite gradient in parameter group '{group}'")
    param -= lr * grad


class ParamGroup:
    """Named set of parameter arrays sharing one learning rate."""

    def __init__(self, name: str, lr0: float, params: dict[str, np.ndarray]):
        self.name = name
        self.lr0 = lr0
        self.params = params
        self.adam = {k: AdamState.like(p) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float, optimizer: str):
        for key, param in self.params.items():
            if optimizer == "adam":
                adam_step(param, grads[key], self.adam[key], lr, self.name)
            else:
                sgd_step(param, grads[key], lr, self.name)

    def prune(self, keep: np.ndarray):
        """Drop balls along the leading axis of every array and its moments."""
        for key in self.params:
            self.params[key] = self.params[key][keep]
            st = self.adam[key]
            self.adam[key] = AdamState(st.m[keep], st.v[keep], st.t)


class ParamGroups:
    """The four optimizer groups: coords, pressure, std, deform.

    Group membership partitions the learnable scalars; no array may appear
    in two groups.
    """

    ORDER = ("coords", "pressure", "std", "deform")

    def __init__(self, groups: dict[str, ParamGroup]):
        if set(groups) != set(self.ORDER):
            raise ValueError(f"groups must be exactly {self.ORDER}")
        seen: set[int] = set()
        for g in groups.values():
            for p in g.params.values():
                if id(p) in seen:
                    raise ValueError(
                        "a parameter array appears in more than one group")
                seen.add(id(p))
        self.groups = groups

    def __getitem__(self, name: str) -> ParamGroup:
        return self.groups[name]

    def lrs_at(self, iteration: int, step_size: int,
               drop_rate: float) -> dict[str, float]:
        return {name: scheduled_lr(g.lr0, iteration, step_size, drop_rate)
                for name, g in self.groups.items()}

    def prune(self, keep: np.ndarray):
        for g in self.groups.values():
            g.prune(keep)


@dataclass
class TrainState:
    """Running state of one optimization stage."""

    iteration: int = 0
    lrs: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0))


def _emit(progress, record: dict):
    if progress is not None:
        progress(record)


def _clamp_floors(p0, a0, config: ReconConfig, sigma=None):
    np.maximum(p0, config.p0_floor, out=p0)
    np.maximum(a0, config.a0_floor, out=a0)
    if sigma is not None:
        np.maximum(sigma, config.sigma_floor, out=sigma)


def static_reconstruct(observed: np.ndarray, array: SensorArray,
                       config: ReconConfig, roi: Box,
                       progress=None) -> list[GaussBall]:
    """Fit a static ball cloud to one reference frame.

    Starts from a uniform lattice over `roi` (pitch `config.init_pitch`,
    a0 = pitch/2, p0 = init_p0_scale * data peak), runs Adam on
    (p0, a0, mu) against the L2 signal loss and prunes balls whose pressure
    falls below prune_threshold * max(p0) every prune_every iterations.
    Raises when every ball is pruned.
    """
    observed = np.ascontiguousarray(observed, dtype=np.float64)
    if observed.shape != (array.n_sensors, array.n_samples):
        raise ValueError(
            f"observed shape {observed.shape} does not match the array")
    from .geometry import box_lattice
    mu = box_lattice(roi, config.init_pitch)
    n_balls = len(mu)
    a0 = np.full(n_balls, config.init_pitch / 2.0)
    peak = float(np.max(np.abs(observed))) if observed.size else 0.0
    p0 = np.full(n_balls, config.init_p0_scale * peak)

    groups = ParamGroups({
        "coords": ParamGroup("coords", config.lr_coords, {"mu": mu}),
        "pressure": ParamGroup("pressure", config.lr_pressure, {"p0": p0}),
        "std": ParamGroup("std", config.lr_std, {"a0": a0}),
        "deform": ParamGroup("deform", config.lr_deform, {}),
    })
    state = TrainState(rng=np.random.default_rng(config.seed))

    for it in range(config.static_iters):
        mu = groups["coords"].params["mu"]
        p0 = groups["pressure"].params["p0"]
        a0 = groups["std"].params["a0"]
        state.iteration = it
        state.lrs = groups.lrs_at(it, config.step_size, config.drop_rate)
        cloud_state = CloudState(a0, p0, mu)
        predicted = forward_frame(cloud_state, array, config.support_sigmas,
                                  config.exact_forward)
        residual = predicted - observed
        loss = 0.5 * float(np.sum(residual * residual))
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        state.loss_history.append(loss)
        grads = frame_state_grads(cloud_state, array, residual,
                                  config.support_sigmas, config.exact_forward)
        groups["pressure"].step({"p0": grads[:, 1]},
                                state.lrs["pressure"], config.optimizer)
        groups["std"].step({"a0": grads[:, 0]},
                           state.lrs["std"], config.optimizer)
        groups["coords"].step({"mu": grads[:, 2:5]},
                              state.lrs["coords"], config.optimizer)
        _clamp_floors(groups["pressure"].params["p0"],
                      groups["std"].params["a0"], config)
        _emit(progress, {"stage": "static", "iteration": it, "loss": loss,
                         "n_balls": int(len(groups["pressure"].params["p0"])),
                         **{f"lr_{k}": v for k, v in state.lrs.items()}})
        if (it + 1) % config.prune_every == 0:
            p0 = groups["pressure"].params["p0"]
            threshold = config.prune_threshold * float(np.max(p0, initial=0.0))
            keep = p0 > threshold
            if not np.any(keep):
                raise RuntimeError(
                    "all balls pruned; lower recon.prune_threshold or check "
                    "the input data")
            if not np.all(keep):
                groups.prune(keep)

    p0 = groups["pressure"].params["p0"]
    a0 = groups["std"].params["a0"]
    mu = groups["coords"].params["mu"]
    return [GaussBall(p0[i], a0[i], mu[i]) for i in range(len(p0))]


@dataclass
class _Params:
    """Duck-typed parameter bundle accepted by the deformation helpers."""

    p0: np.ndarray
    a0: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray


def _select_frames(n_frames: int, batch: int,
                   rng: np.random.Generator) -> np.ndarray:
    if batch <= 0 or batch >= n_frames:
        return np.arange(n_frames)
    return np.sort(rng.choice(n_frames, size=batch, replace=False))


def dynamic_reconstruct(observed: SignalSet, array: SensorArray,
                        init_balls, config: ReconConfig,
                        roi: Box | None = None,
                        progress=None) -> DynamicCloud:
    """Fit deformation fields and baseline attributes to all frames.

    `init_balls` (typically the static stage output for the reference
    frame) receives identity-initialized deformation fields; every
    iteration forward-models the selected frames at their normalized times
    and applies one Adam step per parameter group.  When `roi` is given,
    balls drifting outside it at any frame time raise a warning after
    training (never an error).
    """
    init_balls = list(init_balls)
    if not init_balls:
        raise ValueError("init cloud must be nonempty")
    if observed.n_frames < 2:
        raise ValueError("dynamic reconstruction needs at least 2 frames")
    observed.validate_against(array)

    n_balls = len(init_balls)
    nb = config.n_basis
    p0 = np.array([b.p0 for b in init_balls])
    a0 = np.array([b.a0 for b in init_balls])
    mu = np.array([b.mu for b in init_balls])
    th, sg = default_basis_grid(nb)
    theta = np.broadcast_to(th, (n_balls, nb)).copy()
    sigma = np.broadcast_to(sg, (n_balls, nb)).copy()
    omega = np.zeros((n_balls, N_CHANNELS, nb))

    groups = ParamGroups({
        "coords": ParamGroup("coords", config.lr_coords, {"mu": mu}),
        "pressure": ParamGroup("pressure", config.lr_pressure, {"p0": p0}),
        "std": ParamGroup("std", config.lr_std, {"a0": a0}),
        "deform": ParamGroup("deform", config.lr_deform,
                             {"theta": theta, "sigma": sigma,
                              "omega": omega}),
    })
    state = TrainState(rng=np.random.default_rng(config.seed))

    for it in range(config.dynamic_iters):
        state.iteration = it
        state.lrs = groups.lrs_at(it, config.step_size, config.drop_rate)
        params = _Params(p0, a0, mu, theta, sigma, omega)
        frames = _select_frames(observed.n_frames, config.frame_batch,
                                state.rng)
        loss = 0.0
        acc = CloudGrads(np.zeros(n_balls), np.zeros(n_balls),
                         np.zeros((n_balls, 3)), np.zeros_like(theta),
                         np.zeros_like(sigma), np.zeros_like(omega))
        for k in frames:
            t = float(observed.frame_times[k])
            cloud_state = cloud_states_at(params, t, config.coord_mode,
                                          a0_floor=config.a0_floor)
            sg_t = cloud_state_grads(params, t, config.coord_mode,
                                     a0_floor=config.a0_floor)
            predicted = forward_frame(cloud_state, array,
                                      config.support_sigmas,
                                      config.exact_forward)
            residual = predicted - observed.frame(k)
            loss += 0.5 * float(np.sum(residual * residual))
            acc += accumulate_frame_grads(cloud_state, sg_t, array, residual,
                                          config.support_sigmas,
                                          config.exact_forward)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        state.loss_history.append(loss)
        groups["pressure"].step({"p0": acc.p0}, state.lrs["pressure"],
                                config.optimizer)
        groups["std"].step({"a0": acc.a0}, state.lrs["std"], config.optimizer)
        groups["coords"].step({"mu": acc.mu}, state.lrs["coords"],
                              config.optimizer)
        groups["deform"].step({"theta": acc.theta, "sigma": acc.sigma,
                               "omega": acc.omega}, state.lrs["deform"],
                              config.optimizer)
        _clamp_floors(p0, a0, config, sigma=sigma)
        _emit(progress, {"stage": "dynamic", "iteration": it, "loss": loss,
                         "n_balls": n_balls,
                         "frames": [int(k) for k in frames],
                         **{f"lr_{k}": v for k, v in state.lrs.items()}})
    cloud = DynamicCloud(p0, a0, mu, theta, sigma, omega)
    if roi is not None:
        _warn_outside_roi(cloud, roi, observed.frame_times, config)
    return cloud


def _warn_outside_roi(cloud: DynamicCloud, roi: Box, times, config):
    worst = 0
    for t in times:
        state = cloud_states_at(cloud, float(t), config.coord_mode,
                                a0_floor=config.a0_floor)
        worst = max(worst, int(np.sum(~roi.contains(state.mu_t))))
    if worst:
        import warnings
        warnings.warn(
            f"{worst} ball(s) drift outside the region of interest at some "
            f"frame time", RuntimeWarning, stacklevel=3)


@njit(parallel=True, cache=True)
def _backproject(filtered, positions, v, t0, dt, ox, oy, oz, sp,
                 nx, ny, nz, out):
    n_sensors = positions.shape[0]
    n_samples = filtered.shape[1]
    w = 1.0 / n_sensors
    for ix in prange(nx):
        x = ox + ix * sp
        for iy in range(ny):
            y = oy + iy * sp
            for iz in range(nz):
                z = oz + iz * sp
                acc = 0.0
                for m in range(n_sensors):
                    dx = x - positions[m, 0]
                    dy = y - positions[m, 1]
                    dz = z - positions[m, 2]
                    tof = np.sqrt(dx * dx + dy * dy + dz * dz) / v
                    u = (tof - t0) / dt
                    j = int(u)
                    if j >= n_samples - 1:
                        j = n_samples - 2
                    frac = u - j
                    acc += w * ((1.0 - frac) * filtered[m, j]
                                + frac * filtered[m, j + 1])
                out[ix, iy, iz] = acc


def ubp_reconstruct(traces: np.ndarray, array: SensorArray,
                    spec: GridSpec) -> VoxelGrid:
    """Universal back-projection of one frame onto a voxel grid.

    Each trace is filtered to b(t) = 2 p(t) - 2 t dp/dt (central-difference
    derivative) and summed over sensors at every voxel's time of flight
    with uniform weights and linear interpolation in time.
    """
    traces = np.ascontiguousarray(traces, dtype=np.float64)
    if traces.shape != (array.n_sensors, array.n_samples):
        raise ValueError(
            f"traces shape {traces.shape} does not match the array")
    times = array.sample_times()
    lo = spec.origin
    hi = spec.origin + spec.spacing * (np.array(spec.dims) - 1)
    corners = np.array([[lo[i] if (k >> i) & 1 == 0 else hi[i]
                         for i in range(3)] for k in range(8)])
    d_corner = np.linalg.norm(
        array.positions[:, None, :] - corners[None, :, :], axis=2)
    closest = np.clip(array.positions, lo, hi)
    d_near = np.linalg.norm(array.positions - closest, axis=1)
    tof_min = float(np.min(d_near)) / array.sound_speed
    tof_max = float(np.max(d_corner)) / array.sound_speed
    if tof_min < times[0] or tof_max > times[-1]:
        raise ValueError(
            f"sample window [{times[0]:.3f}, {times[-1]:.3f}] us does not "
            f"cover voxel times of flight [{tof_min:.3f}, {tof_max:.3f}] us "
            f"(shortfall {max(0.0, times[0] - tof_min):.3f} us before, "
            f"{max(0.0, tof_max - times[-1]):.3f} us after)")

    dp_dt = np.gradient(traces, array.dt, axis=1)
    filtered = 2.0 * traces - 2.0 * times[None, :] * dp_dt
    out = np.zeros(spec.dims)
    _backproject(filtered, array.positions, array.sound_speed,
                 array.t_start, array.dt, spec.origin[0], spec.origin[1],
                 spec.origin[2], spec.spacing, spec.dims[0], spec.dims[1],
                 spec.dims[2], out)
    return VoxelGrid(spec.origin, spec.spacing, spec.dims, out)
