"""Closed-form photoacoustic forward model for Gaussian-ball sources.

A spherically symmetric source with initial pressure profile
``p0 exp(-r^2 / (2 a0^2))`` and zero initial velocity radiates the bipolar
pressure

    p(R, t) = p0/(2R) * [ (R - vt) exp(-(R - vt)^2 / (2 a0^2))
                        + (R + vt) exp(-(R + vt)^2 / (2 a0^2)) ]

at distance R.  The near-field (R + vt) term is kept so t = 0 exactly
recovers the Gaussian profile.  ``forward_frame`` superposes this kernel
over a cloud; gradients are assembled analytically for the optimizer.

Hot loops run under numba.  They are deterministic for any thread count:
every output row (trace row in the forward pass, ball row in the gradient
pass) is owned by exactly one thread and inner sums run in fixed ball-major
order.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from numba import njit, prange

from .core import Box, SensorArray
from .deformation import BallStateAtT, CloudState, CloudStateGrad

# Beyond this many standard deviations from the wavefront a ball's
# contribution is below exp(-18) of its weight and may be skipped.
DEFAULT_SUPPORT_SIGMAS = 6.0

_COINCIDENCE_EPS = 1e-9


def pressure_kernel(R, t, p0, a0, v):
    """Pressure radiated by one Gaussian ball, broadcasting over inputs.

    Parameters are the source-sensor distance R (mm, > 0), time t (us),
    peak pressure p0, profile standard deviation a0 (mm, > 0) and sound
    speed v (mm/us, > 0).
    """
    R = np.asarray(R, dtype=np.float64)
    if np.any(R <= 0):
        raise ValueError("source-sensor distance R must be > 0 "
                         "(sensor coincides with the ball center)")
    if not (np.all(np.asarray(a0) > 0) and v > 0):
        raise ValueError("a0 and v must be > 0")
    t = np.asarray(t, dtype=np.float64)
    um = R - v * t
    up = R + v * t
    inv2a2 = 1.0 / (2.0 * np.asarray(a0, dtype=np.float64) ** 2)
    out = (p0 / (2.0 * R)) * (um * np.exp(-um * um * inv2a2)
                              + up * np.exp(-up * up * inv2a2))
    return float(out) if np.ndim(out) == 0 else out


def pressure_kernel_grad(R, t, p0, a0, v):
    """Partials of pressure_kernel w.r.t. (p0, a0, R), broadcasting.

    Returns ``(d_p0, d_a0, d_R)``.  The chain to a ball center goes through
    dR/dmu = (mu - sensor)/R.
    """
    R = np.asarray(R, dtype=np.float64)
    if np.any(R <= 0):
        raise ValueError("source-sensor distance R must be > 0")
    if not (np.all(np.asarray(a0) > 0) and v > 0):
        raise ValueError("a0 and v must be > 0")
    t = np.asarray(t, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    um = R - v * t
    up = R + v * t
    inv_a2 = 1.0 / (a0 * a0)
    gm = np.exp(-0.5 * um * um * inv_a2)
    gp = np.exp(-0.5 * up * up * inv_a2)
    s = um * gm + up * gp
    d_p0 = s / (2.0 * R)
    d_a0 = (p0 / (2.0 * R)) * (um ** 3 * gm + up ** 3 * gp) * inv_a2 / a0
    ds_dR = gm * (1.0 - um * um * inv_a2) + gp * (1.0 - up * up * inv_a2)
    d_R = -(p0 * s) / (2.0 * R * R) + (p0 / (2.0 * R)) * ds_dR
    if np.ndim(d_p0) == 0:
        return float(d_p0), float(d_a0), float(d_R)
    return d_p0, d_a0, d_R


@njit(parallel=True, cache=True)
def _forward_traces(mu_t, a0_t, p0_t, positions, v, t0, dt, n_samples,
                    support, exact, out, flag):
    n_sensors = positions.shape[0]
    n_balls = mu_t.shape[0]
    for m in prange(n_sensors):
        for b in range(n_balls):
            dx = mu_t[b, 0] - positions[m, 0]
            dy = mu_t[b, 1] - positions[m, 1]
            dz = mu_t[b, 2] - positions[m, 2]
            R = np.sqrt(dx * dx + dy * dy + dz * dz)
            if R < _COINCIDENCE_EPS:
                flag[0] = 1
                continue
            if exact:
                jlo, jhi = 0, n_samples
            else:
                tlo = (R - support * a0_t[b]) / v
                thi = (R + support * a0_t[b]) / v
                jlo = int(np.ceil((tlo - t0) / dt))
                jhi = int(np.floor((thi - t0) / dt)) + 1
                if jlo < 0:
                    jlo = 0
                if jhi > n_samples:
                    jhi = n_samples
            inv2a2 = 1.0 / (2.0 * a0_t[b] * a0_t[b])
            c = p0_t[b] / (2.0 * R)
            for j in range(jlo, jhi):
                t = t0 + j * dt
                um = R - v * t
                up = R + v * t
                out[m, j] += c * (um * np.exp(-um * um * inv2a2)
                                  + up * np.exp(-up * up * inv2a2))


@njit(parallel=True, cache=True)
def _residual_state_grads(mu_t, a0_t, p0_t, positions, v, t0, dt, residual,
                          support, exact, G, flag):
    n_sensors = positions.shape[0]
    n_balls = mu_t.shape[0]
    n_samples = residual.shape[1]
    for b in prange(n_balls):
        a0 = a0_t[b]
        p0 = p0_t[b]
        inv_a2 = 1.0 / (a0 * a0)
        for m in range(n_sensors):
            dx = mu_t[b, 0] - positions[m, 0]
            dy = mu_t[b, 1] - positions[m, 1]
            dz = mu_t[b, 2] - positions[m, 2]
            R = np.sqrt(dx * dx + dy * dy + dz * dz)
            if R < _COINCIDENCE_EPS:
                flag[0] = 1
                continue
            if exact:
                jlo, jhi = 0, n_samples
            else:
                tlo = (R - support * a0) / v
                thi = (R + support * a0) / v
                jlo = int(np.ceil((tlo - t0) / dt))
                jhi = int(np.floor((thi - t0) / dt)) + 1
                if jlo < 0:
                    jlo = 0
                if jhi > n_samples:
                    jhi = n_samples
            inv2R = 1.0 / (2.0 * R)
            acc_p = 0.0
            acc_a = 0.0
            acc_R = 0.0
            for j in range(jlo, jhi):
                r = residual[m, j]
                if r == 0.0:
                    continue
                t = t0 + j * dt
                um = R - v * t
                up = R + v * t
                gm = np.exp(-0.5 * um * um * inv_a2)
                gp = np.exp(-0.5 * up * up * inv_a2)
                s = um * gm + up * gp
                k1 = s * inv2R
                acc_p += r * k1
                acc_a += r * (um * um * um * gm + up * up * up * gp)
                acc_R += r * (-p0 * k1 / R + p0 * inv2R
                              * (gm * (1.0 - um * um * inv_a2)
                                 + gp * (1.0 - up * up * inv_a2)))
            G[b, 0] += acc_a * p0 * inv2R * inv_a2 / a0
            G[b, 1] += acc_p
            G[b, 2] += acc_R * dx / R
            G[b, 3] += acc_R * dy / R
            G[b, 4] += acc_R * dz / R


def _as_cloud_state(states) -> CloudState:
    if isinstance(states, CloudState):
        return states
    if isinstance(states, (list, tuple)):
        if all(isinstance(s, BallStateAtT) for s in states):
            return CloudState.from_states(states)
    raise TypeError("states must be a CloudState or a list of BallStateAtT")


def _raise_coincident(state: CloudState, array: SensorArray):
    d = np.linalg.norm(state.mu_t[:, None, :] - array.positions[None, :, :],
                       axis=2)
    b, m = np.unravel_index(np.argmin(d), d.shape)
    raise ValueError(
        f"ball {b} coincides with sensor {m} "
        f"(distance {d[b, m]:.3g} mm)")


def forward_frame(states, array: SensorArray,
                  support_sigmas: float = DEFAULT_SUPPORT_SIGMAS,
                  exact: bool = False) -> np.ndarray:
    """Superpose every ball's pressure trace at every sensor.

    Returns an (M, T) array aligned to the array's sample times.  The fast
    path skips samples farther than `support_sigmas` standard deviations
    from a ball's wavefront; `exact=True` evaluates every sample.
    """
    state = _as_cloud_state(states)
    out = np.zeros((array.n_sensors, array.n_samples))
    if len(state) == 0:
        return out
    if np.any(state.a0_t <= 0):
        raise ValueError("all a0_t must be > 0 (clamp before the radiator)")
    flag = np.zeros(1, dtype=np.int64)
    _forward_traces(state.mu_t, state.a0_t, state.p0_t, array.positions,
                    array.sound_speed, array.t_start, array.dt,
                    array.n_samples, support_sigmas, exact, out, flag)
    if flag[0]:
        _raise_coincident(state, array)
    return out


def frame_state_grads(states, array: SensorArray, residual: np.ndarray,
                      support_sigmas: float = DEFAULT_SUPPORT_SIGMAS,
                      exact: bool = False) -> np.ndarray:
    """Gradient of 0.5*||residual||^2 w.r.t. the per-ball state variables.

    `residual` is predicted - observed, shape (M, T).  Returns (B, 5) in
    state order (a0_t, p0_t, mu_x_t, mu_y_t, mu_z_t).
    """
    state = _as_cloud_state(states)
    if residual.shape != (array.n_sensors, array.n_samples):
        raise ValueError(
            f"residual shape {residual.shape} does not match the array "
            f"({array.n_sensors}, {array.n_samples})")
    G = np.zeros((len(state), 5))
    if len(state) == 0:
        return G
    flag = np.zeros(1, dtype=np.int64)
    _residual_state_grads(state.mu_t, state.a0_t, state.p0_t, array.positions,
                          array.sound_speed, array.t_start, array.dt,
                          np.ascontiguousarray(residual, dtype=np.float64),
                          support_sigmas, exact, G, flag)
    if flag[0]:
        _raise_coincident(state, array)
    return G


@dataclass
class CloudGrads:
    """Loss gradients for every cloud parameter; shapes match the cloud."""

    p0: np.ndarray      # (B,)
    a0: np.ndarray      # (B,)
    mu: np.ndarray      # (B, 3)
    theta: np.ndarray   # (B, N) shared basis, (B, 5, N) per-channel
    sigma: np.ndarray
    omega: np.ndarray   # (B, 5, N)

    def __iadd__(self, other: "CloudGrads") -> "CloudGrads":
        self.p0 += other.p0
        self.a0 += other.a0
        self.mu += other.mu
        self.theta += other.theta
        self.sigma += other.sigma
        self.omega += other.omega
        return self


def accumulate_frame_grads(states, state_grads: CloudStateGrad,
                           array: SensorArray, residual: np.ndarray,
                           support_sigmas: float = DEFAULT_SUPPORT_SIGMAS,
                           exact: bool = False) -> CloudGrads:
    """Compose radiator and deformation partials into parameter gradients.

    `state_grads` is the Jacobian bundle produced by
    ``deformation.cloud_state_grads`` at the same frame time as `states`.
    """
    G = frame_state_grads(states, array, residual, support_sigmas, exact)
    sg = state_grads
    n_balls, _, n_basis = sg.d_omega.shape
    grad_base = G * sg.d_base                                 # (B, 5)
    c_omega = G[:, :, None] * sg.d_omega                      # (B, 5, N)
    c_theta = G[:, :, None] * sg.d_theta
    c_sigma = G[:, :, None] * sg.d_sigma
    grad_omega = np.zeros((n_balls, 5, n_basis))
    np.add.at(grad_omega, (slice(None), sg.omega_row), c_omega)
    if sg.shared_basis:
        grad_theta = c_theta.sum(axis=1)
        grad_sigma = c_sigma.sum(axis=1)
    else:
        grad_theta = np.zeros((n_balls, 5, n_basis))
        grad_sigma = np.zeros((n_balls, 5, n_basis))
        np.add.at(grad_theta, (slice(None), sg.omega_row), c_theta)
        np.add.at(grad_sigma, (slice(None), sg.omega_row), c_sigma)
    return CloudGrads(p0=grad_base[:, 1], a0=grad_base[:, 0],
                      mu=grad_base[:, 2:5].copy(), theta=grad_theta,
                      sigma=grad_sigma, omega=grad_omega)


def compute_time_window(array: SensorArray, roi: Box,
                        margin_a0: float) -> tuple[float, int]:
    """Acquisition window covering every source the ROI can hold.

    The window spans time of flight to the nearest and farthest points of
    the ROI (circumscribed about the origin) padded by six `margin_a0`
    standard deviations of pulse width on each side.  Returns
    ``(t_start, n_samples)`` with the sample count rounded up.
    """
    if margin_a0 < 0:
        raise ValueError("margin_a0 must be >= 0")
    norms = np.linalg.norm(array.positions, axis=1)
    r_near = float(np.min(norms))
    r_far = float(np.max(norms))
    r_roi = roi.circumradius()
    if r_roi >= r_near:
        raise ValueError(
            f"roi circumscribed radius {r_roi:.3f} mm reaches the sensor "
            f"sphere (nearest sensor at {r_near:.3f} mm)")
    v = array.sound_speed
    pad = 6.0 * margin_a0
    t_lo = max(0.0, (r_near - r_roi - pad) / v)
    t_hi = (r_far + r_roi + pad) / v
    # shave fp rounding of the sensor norms before rounding the count up
    span = max(0.0, (t_hi - t_lo) * array.sample_rate - 1e-9)
    return t_lo, int(np.ceil(span)) + 1
