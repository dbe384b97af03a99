"""Temporal deformation of ball attributes via learnable Gaussian bases.

Each deformable channel of a ball carries a curve
``H(t) = sum_n omega_n * exp(-(t - theta_n)^2 / (2 sigma_n^2))`` on
normalized time, and the instantaneous attributes are
``a0(t) = a0 (1 + H_a0(t))``, ``p0(t) = p0 (1 + H_p0(t))`` and, depending on
the coordinate mode, ``mu(t) = mu (1 + H) `` or ``mu + H``.

Everything here is a pure function of its inputs; gradients are exact
analytic expressions (verified against central finite differences in the
test suite).
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from .core import COORD_MODES, N_CHANNELS, DeformField, GaussBall


@dataclass(frozen=True)
class BallStateAtT:
    """Instantaneous attributes of one ball at normalized time t."""

    a0_t: float
    p0_t: float
    mu_t: np.ndarray


@dataclass(frozen=True)
class CloudState:
    """Instantaneous attributes of a whole cloud (structure-of-arrays)."""

    a0_t: np.ndarray   # (B,)
    p0_t: np.ndarray   # (B,)
    mu_t: np.ndarray   # (B, 3)

    def __post_init__(self):
        b = self.a0_t.shape[0]
        if self.p0_t.shape != (b,) or self.mu_t.shape != (b, 3):
            raise ValueError("inconsistent cloud state shapes")

    def __len__(self) -> int:
        return self.a0_t.shape[0]

    @classmethod
    def from_states(cls, states) -> "CloudState":
        states = list(states)
        if not states:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 3)))
        return cls(np.array([s.a0_t for s in states]),
                   np.array([s.p0_t for s in states]),
                   np.array([s.mu_t for s in states]))


def eval_basis(t, theta, sigma):
    """Single Gaussian basis value exp(-(t - theta)^2 / (2 sigma^2)).

    Broadcasts over array inputs; always in (0, 1] with the peak value 1
    attained at t == theta.
    """
    theta = np.asarray(theta, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("basis width sigma must be > 0")
    d = (np.asarray(t, dtype=np.float64) - theta) / sigma
    out = np.exp(-0.5 * d * d)
    return float(out) if out.ndim == 0 else out


def eval_H(t: float, omega, theta, sigma) -> float:
    """Weighted Gaussian-basis sum H(t); zero weights give exactly 0."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (omega.shape == theta.shape == sigma.shape) or omega.ndim != 1:
        raise ValueError(
            f"omega, theta, sigma must be 1-d with equal lengths, got "
            f"{omega.shape}, {theta.shape}, {sigma.shape}")
    if not np.any(omega):
        return 0.0
    return float(omega @ eval_basis(t, theta, sigma))


# Map from state index (a0_t, p0_t, mu_t x/y/z) to the omega row driving it.
def _omega_rows(coord_mode: str) -> np.ndarray:
    if coord_mode == "radial":
        return np.array([0, 1, 2, 2, 2])
    return np.arange(N_CHANNELS)


def _basis_pieces(t, theta, sigma):
    """Basis values and their theta/sigma partials, shape-preserving."""
    u = (t - theta) / sigma
    b = np.exp(-0.5 * u * u)
    db_dtheta = b * u / sigma          # = b (t - theta) / sigma^2
    db_dsigma = b * u * u / sigma      # = b (t - theta)^2 / sigma^3
    return b, db_dtheta, db_dsigma


def ball_state_at(ball: GaussBall, deform: DeformField, t: float,
                  coord_mode: str = "multiplicative",
                  a0_floor: float | None = None) -> BallStateAtT:
    """Instantaneous attributes of one ball at normalized time t.

    With all-zero weights the baseline attributes are returned bit-exactly.
    `a0_floor`, when given, clamps the deformed standard deviation from
    below (the radiator requires a0_t > 0).
    """
    if coord_mode not in COORD_MODES:
        raise ValueError(f"coord_mode must be one of {COORD_MODES}")
    rows = _omega_rows(coord_mode)
    b = eval_basis(t, deform.theta, deform.sigma)   # (N,) or (5, N)
    if deform.shared_basis:
        H = deform.omega @ b
    else:
        H = np.sum(deform.omega * b, axis=1)
    # Zero weights give H == 0.0 exactly, and x*(1+0) == x in IEEE, so the
    # identity deformation reproduces the baseline bit-exactly.
    a0_t = ball.a0 * (1.0 + H[0])
    p0_t = ball.p0 * (1.0 + H[1])
    h_mu = H[rows[2:]]
    if coord_mode == "additive":
        mu_t = ball.mu + h_mu
    else:
        mu_t = ball.mu * (1.0 + h_mu)
    if a0_floor is not None:
        a0_t = max(a0_t, a0_floor)
    return BallStateAtT(float(a0_t), float(p0_t), mu_t)


@dataclass(frozen=True)
class BallStateGrad:
    """Analytic partials of one ball's state at time t.

    Rows of every array follow the state order (a0_t, p0_t, mu_x_t,
    mu_y_t, mu_z_t).  ``d_base[s]`` is the partial of state s w.r.t. its own
    baseline attribute; ``d_omega[s, n]`` the partial w.r.t.
    ``omega[omega_row[s], n]``; ``d_theta``/``d_sigma`` the partials w.r.t.
    the basis parameters feeding state s (shared across channels unless the
    field uses a per-channel basis).
    """

    d_base: np.ndarray    # (5,)
    d_omega: np.ndarray   # (5, N)
    d_theta: np.ndarray   # (5, N)
    d_sigma: np.ndarray   # (5, N)
    omega_row: np.ndarray  # (5,) int
    shared_basis: bool


def ball_state_grad(ball: GaussBall, deform: DeformField, t: float,
                    coord_mode: str = "multiplicative") -> BallStateGrad:
    """Exact partials of ball_state_at w.r.t. every learnable parameter."""
    if coord_mode not in COORD_MODES:
        raise ValueError(f"coord_mode must be one of {COORD_MODES}")
    rows = _omega_rows(coord_mode)
    b, db_dth, db_dsg = _basis_pieces(t, deform.theta, deform.sigma)
    if deform.shared_basis:
        n = deform.n_basis
        b5 = np.broadcast_to(b, (N_CHANNELS, n))
        dth5 = np.broadcast_to(db_dth, (N_CHANNELS, n))
        dsg5 = np.broadcast_to(db_dsg, (N_CHANNELS, n))
    else:
        b5, dth5, dsg5 = b, db_dth, db_dsg
    H = np.sum(deform.omega * b5, axis=1)

    base = np.array([ball.a0, ball.p0, *ball.mu])
    if coord_mode == "additive":
        factor = np.array([ball.a0, ball.p0, 1.0, 1.0, 1.0])
        d_base = np.array([1.0 + H[0], 1.0 + H[1], 1.0, 1.0, 1.0])
    else:
        factor = base.copy()
        d_base = 1.0 + H[rows]
    omega_sel = deform.omega[rows]            # (5, N), row per state
    d_omega = factor[:, None] * b5[rows]
    d_theta = factor[:, None] * omega_sel * dth5[rows]
    d_sigma = factor[:, None] * omega_sel * dsg5[rows]
    return BallStateGrad(d_base, d_omega, d_theta, d_sigma, rows,
                         deform.shared_basis)


def cloud_states_at(cloud, t: float, coord_mode: str = "multiplicative",
                    a0_floor: float | None = None) -> CloudState:
    """Vectorized ball_state_at over a DynamicCloud (or compatible arrays)."""
    if coord_mode not in COORD_MODES:
        raise ValueError(f"coord_mode must be one of {COORD_MODES}")
    rows = _omega_rows(coord_mode)
    b, _, _ = _basis_pieces(t, cloud.theta, cloud.sigma)
    if cloud.theta.ndim == 2:                     # shared basis: (B, N)
        H = np.einsum("bcn,bn->bc", cloud.omega, b)
    else:                                          # per-channel: (B, 5, N)
        H = np.sum(cloud.omega * b, axis=2)
    a0_t = cloud.a0 * (1.0 + H[:, 0])
    p0_t = cloud.p0 * (1.0 + H[:, 1])
    h_mu = H[:, rows[2:]]
    if coord_mode == "additive":
        mu_t = cloud.mu + h_mu
    else:
        mu_t = cloud.mu * (1.0 + h_mu)
    if a0_floor is not None:
        a0_t = np.maximum(a0_t, a0_floor)
    return CloudState(a0_t, p0_t, np.ascontiguousarray(mu_t))


@dataclass(frozen=True)
class CloudStateGrad:
    """Vectorized BallStateGrad over a cloud; leading axis is the ball."""

    d_base: np.ndarray    # (B, 5)
    d_omega: np.ndarray   # (B, 5, N)
    d_theta: np.ndarray   # (B, 5, N)
    d_sigma: np.ndarray   # (B, 5, N)
    omega_row: np.ndarray  # (5,)
    shared_basis: bool


def cloud_state_grads(cloud, t: float, coord_mode: str = "multiplicative",
                      a0_floor: float | None = None) -> CloudStateGrad:
    """Vectorized ball_state_grad over a DynamicCloud.

    When `a0_floor` is active and a ball's a0_t sits at the clamp, the a0_t
    row of its partials is zeroed (clamp subgradient), matching what the
    optimizer sees through the forward pass.
    """
    if coord_mode not in COORD_MODES:
        raise ValueError(f"coord_mode must be one of {COORD_MODES}")
    rows = _omega_rows(coord_mode)
    b, db_dth, db_dsg = _basis_pieces(t, cloud.theta, cloud.sigma)
    nb = cloud.theta.shape[-1]
    bsz = cloud.p0.shape[0]
    if cloud.theta.ndim == 2:
        shared = True
        b5 = np.broadcast_to(b[:, None, :], (bsz, N_CHANNELS, nb))
        dth5 = np.broadcast_to(db_dth[:, None, :], (bsz, N_CHANNELS, nb))
        dsg5 = np.broadcast_to(db_dsg[:, None, :], (bsz, N_CHANNELS, nb))
    else:
        shared = False
        b5, dth5, dsg5 = b, db_dth, db_dsg
    H = np.sum(cloud.omega * b5, axis=2)

    base = np.column_stack([cloud.a0, cloud.p0, cloud.mu])
    if coord_mode == "additive":
        factor = base.copy()
        factor[:, 2:] = 1.0
        d_base = np.ones((bsz, N_CHANNELS))
        d_base[:, 0] = 1.0 + H[:, 0]
        d_base[:, 1] = 1.0 + H[:, 1]
    else:
        factor = base.copy()
        d_base = 1.0 + H[:, rows]
    omega_sel = cloud.omega[:, rows, :]
    d_omega = factor[:, :, None] * b5[:, rows, :]
    d_theta = factor[:, :, None] * omega_sel * dth5[:, rows, :]
    d_sigma = factor[:, :, None] * omega_sel * dsg5[:, rows, :]
    if a0_floor is not None:
        a0_t = cloud.a0 * (1.0 + H[:, 0])
        clamped = a0_t < a0_floor
        if np.any(clamped):
            d_base[clamped, 0] = 0.0
            d_omega[clamped, 0, :] = 0.0
            d_theta[clamped, 0, :] = 0.0
            d_sigma[clamped, 0, :] = 0.0
    return CloudStateGrad(d_base, np.ascontiguousarray(d_omega),
                          np.ascontiguousarray(d_theta),
                          np.ascontiguousarray(d_sigma), rows, shared)
