import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pacloud.core import DeformField, GaussBall, default_basis_grid
from pacloud.deformation import (ball_state_at, ball_state_grad,
                                 cloud_state_grads, cloud_states_at,
                                 eval_H, eval_basis)
from pacloud.core import DynamicCloud

from oracles import rel_err


def random_field(rng, n=6, shared=True):
    theta = rng.uniform(0.0, 1.0, n)
    sigma = rng.uniform(0.05, 0.5, n)
    omega = rng.uniform(-0.5, 0.5, (5, n))
    if not shared:
        theta = np.tile(theta, (5, 1)) + rng.uniform(-0.02, 0.02, (5, n))
        sigma = np.tile(sigma, (5, 1)) * rng.uniform(0.9, 1.1, (5, n))
    return DeformField(theta, sigma, omega)


class TestEvalBasis:
    def test_peak_is_one(self):
        assert eval_basis(0.5, 0.5, 0.1) == 1.0

    def test_direct_evaluation(self):
        # exp(-(0.6-0.5)^2 / (2*0.1^2)) = exp(-1/2)
        assert eval_basis(0.6, 0.5, 0.1) == pytest.approx(math.exp(-0.5),
                                                          rel=1e-12)
        assert eval_basis(0.6, 0.5, 0.1) == pytest.approx(0.6065306597126334)

    def test_flat_limit(self):
        assert eval_basis(0.5, 0.0, 1e9) == pytest.approx(1.0, abs=1e-12)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            eval_basis(0.5, 0.5, 0.0)
        with pytest.raises(ValueError):
            eval_basis(0.5, 0.5, -1.0)

    @given(t=st.floats(-2, 3), theta=st.floats(0, 1),
           sigma=st.floats(1e-3, 10))
    @settings(max_examples=200, deadline=None)
    def test_range(self, t, theta, sigma):
        v = eval_basis(t, theta, sigma)
        assert 0.0 <= v <= 1.0
        # strictly positive until the exponent underflows f64
        if 0.5 * ((t - theta) / sigma) ** 2 < 700.0:
            assert v > 0.0


class TestEvalH:
    def test_zero_weights(self):
        theta, sigma = default_basis_grid(5)
        assert eval_H(0.3, np.zeros(5), theta, sigma) == 0.0

    def test_single_basis_at_center(self):
        assert eval_H(0.7, [0.3], [0.7], [0.2]) == pytest.approx(0.3)

    def test_two_basis_hand_value(self):
        got = eval_H(0.0, [0.5, -0.2], [0.0, 1.0], [1.0, 1.0])
        assert got == pytest.approx(0.5 - 0.2 * math.exp(-0.5), rel=1e-12)
        assert got == pytest.approx(0.37869386805747335)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            eval_H(0.0, [0.5, 0.2], [0.0], [1.0, 1.0])

    @given(scale=st.floats(-3, 3))
    @settings(max_examples=100, deadline=None)
    def test_linear_in_omega(self, scale):
        omega = np.array([0.4, -0.1, 0.2])
        theta = np.array([0.1, 0.5, 0.9])
        sigma = np.array([0.2, 0.3, 0.1])
        h1 = eval_H(0.4, omega, theta, sigma)
        h2 = eval_H(0.4, scale * omega, theta, sigma)
        assert h2 == pytest.approx(scale * h1, rel=1e-12, abs=1e-15)


class TestBallStateAt:
    def test_identity_is_bit_exact(self, rng):
        ball = GaussBall(1.7, 0.31, rng.uniform(-5, 5, 3))
        deform = DeformField.identity(65)
        for t in np.linspace(0, 1, 11):
            s = ball_state_at(ball, deform, t)
            assert s.a0_t == ball.a0
            assert s.p0_t == ball.p0
            assert np.array_equal(s.mu_t, ball.mu)

    def test_pressure_substitution(self):
        # H_p0(t) = 0.1 at the basis center -> p0_t = 2 * 1.1
        omega = np.zeros((5, 1))
        omega[1, 0] = 0.1
        deform = DeformField([0.5], [0.2], omega)
        s = ball_state_at(GaussBall(2.0, 1.0, (0, 0, 0)), deform, 0.5)
        assert s.p0_t == pytest.approx(2.2, rel=1e-12)

    def test_multiplicative_origin_fixed_point(self, rng):
        deform = random_field(rng)
        s = ball_state_at(GaussBall(1.0, 1.0, (0, 0, 0)), deform, 0.4,
                          "multiplicative")
        assert np.all(s.mu_t == 0.0)

    def test_additive_moves_origin(self):
        omega = np.zeros((5, 1))
        omega[2, 0] = 0.25
        deform = DeformField([0.5], [0.3], omega)
        s = ball_state_at(GaussBall(1.0, 1.0, (0, 0, 0)), deform, 0.5,
                          "additive")
        assert s.mu_t[0] == pytest.approx(0.25)
        assert s.mu_t[1] == 0.0

    def test_radial_mode_scales_all_coordinates(self):
        omega = np.zeros((5, 1))
        omega[2, 0] = 0.5
        deform = DeformField([0.5], [0.3], omega)
        s = ball_state_at(GaussBall(1.0, 1.0, (2.0, -1.0, 4.0)), deform, 0.5,
                          "radial")
        assert np.allclose(s.mu_t, [3.0, -1.5, 6.0])

    def test_a0_floor_clamps(self):
        omega = np.zeros((5, 1))
        omega[0, 0] = -0.999
        deform = DeformField([0.5], [0.3], omega)
        s = ball_state_at(GaussBall(1.0, 1.0, (0, 0, 0)), deform, 0.5,
                          a0_floor=0.05)
        assert s.a0_t == 0.05

    def test_bad_mode_rejected(self, rng):
        with pytest.raises(ValueError):
            ball_state_at(GaussBall(1, 1, (0, 0, 0)), random_field(rng),
                          0.5, "spiral")


def _flatten_params(ball, deform):
    return np.concatenate([[ball.a0, ball.p0], ball.mu,
                           deform.omega.ravel(), deform.theta.ravel(),
                           deform.sigma.ravel()])


def _unflatten(x, n, shared):
    a0, p0 = x[0], x[1]
    mu = x[2:5]
    om_end = 5 + 5 * n
    omega = x[5:om_end].reshape(5, n)
    if shared:
        theta = x[om_end:om_end + n]
        sigma = x[om_end + n:]
    else:
        theta = x[om_end:om_end + 5 * n].reshape(5, n)
        sigma = x[om_end + 5 * n:].reshape(5, n)
    return GaussBall(max(p0, 0.0) if p0 >= 0 else p0, a0, mu), \
        DeformField(theta, sigma, omega)


def _analytic_jacobian(ball, deform, t, mode):
    g = ball_state_grad(ball, deform, t, mode)
    n = deform.n_basis
    shared = deform.shared_basis
    p = 5 + 5 * n + (n if shared else 5 * n) * 2
    jac = np.zeros((5, p))
    # baseline block: state s depends only on base component s
    jac[0, 0] = g.d_base[0]
    jac[1, 1] = g.d_base[1]
    for i in range(3):
        jac[2 + i, 2 + i] = g.d_base[2 + i]
    # omega block: state s driven by omega row omega_row[s]
    for s in range(5):
        row = g.omega_row[s]
        jac[s, 5 + row * n:5 + (row + 1) * n] = g.d_omega[s]
    off = 5 + 5 * n
    if shared:
        jac[:, off:off + n] = g.d_theta
        jac[:, off + n:off + 2 * n] = g.d_sigma
    else:
        for s in range(5):
            row = g.omega_row[s]
            jac[s, off + row * n:off + (row + 1) * n] = g.d_theta[s]
            jac[s, off + 5 * n + row * n:off + 5 * n + (row + 1) * n] = \
                g.d_sigma[s]
    return jac


def _fd_jacobian(ball, deform, t, mode, step=1e-5):
    x0 = _flatten_params(ball, deform)
    n = deform.n_basis
    shared = deform.shared_basis
    # theta/sigma live on the unit time axis: plain 1e-5 steps there
    scales = np.maximum(1.0, np.abs(x0))
    scales[5 + 5 * n:] = 1.0
    jac = np.zeros((5, x0.size))
    for i in range(x0.size):
        h = step * scales[i]
        for sgn, sink in ((1.0, 1.0), (-1.0, -1.0)):
            x = x0.copy()
            x[i] += sgn * h
            b, d = _unflatten(x, n, shared)
            s = ball_state_at(b, d, t, mode)
            vec = np.array([s.a0_t, s.p0_t, *s.mu_t])
            jac[:, i] += sink * vec / (2.0 * h)
    return jac


class TestBallStateGrad:
    def test_identity_jacobian(self, rng):
        ball = GaussBall(2.0, 0.4, rng.uniform(-3, 3, 3))
        deform = DeformField.identity(7)
        g = ball_state_grad(ball, deform, 0.3)
        assert np.all(g.d_base == 1.0)
        assert np.all(g.d_theta == 0.0)
        assert np.all(g.d_sigma == 0.0)

    def test_theta_stationary_at_basis_peak(self):
        omega = np.zeros((5, 1))
        omega[1, 0] = 0.3
        deform = DeformField([0.5], [0.2], omega)
        g = ball_state_grad(GaussBall(2.0, 1.0, (1, 1, 1)), deform, 0.5)
        assert g.d_theta[1, 0] == 0.0

    def test_explicit_pressure_partials(self):
        # dp0_t/domega_n = p0 b_n; dp0_t/dtheta_n = p0 w b (t-th)/sg^2, etc.
        p0, w, th, sg, t = 2.0, 0.3, 0.4, 0.2, 0.55
        omega = np.zeros((5, 1))
        omega[1, 0] = w
        deform = DeformField([th], [sg], omega)
        g = ball_state_grad(GaussBall(p0, 1.0, (1, 1, 1)), deform, t)
        b = math.exp(-0.5 * ((t - th) / sg) ** 2)
        assert g.d_omega[1, 0] == pytest.approx(p0 * b, rel=1e-12)
        assert g.d_theta[1, 0] == pytest.approx(
            p0 * w * b * (t - th) / sg ** 2, rel=1e-12)
        assert g.d_sigma[1, 0] == pytest.approx(
            p0 * w * b * (t - th) ** 2 / sg ** 3, rel=1e-12)
        assert g.d_base[1] == pytest.approx(1.0 + w * b, rel=1e-12)

    @pytest.mark.parametrize("mode", ["multiplicative", "additive", "radial"])
    @pytest.mark.parametrize("shared", [True, False])
    def test_matches_finite_differences(self, mode, shared):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            ball = GaussBall(rng.uniform(0.5, 3.0), rng.uniform(0.2, 1.5),
                             rng.uniform(-4, 4, 3))
            deform = random_field(rng, n=4, shared=shared)
            t = rng.uniform(0, 1)
            ana = _analytic_jacobian(ball, deform, t, mode)
            num = _fd_jacobian(ball, deform, t, mode)
            worst = max(worst,
                        float(np.max(rel_err(ana, num, floor_rel=1e-5))))
        assert worst < 1e-5

    def test_cloud_grads_match_single_ball(self, rng):
        balls = [GaussBall(rng.uniform(0.5, 2), rng.uniform(0.3, 1),
                           rng.uniform(-3, 3, 3)) for _ in range(4)]
        deforms = [random_field(rng, n=5) for _ in range(4)]
        cloud = DynamicCloud.from_balls(balls, deforms)
        cg = cloud_state_grads(cloud, 0.37)
        for i in range(4):
            g = ball_state_grad(balls[i], deforms[i], 0.37)
            assert np.allclose(cg.d_base[i], g.d_base, rtol=1e-12)
            assert np.allclose(cg.d_omega[i], g.d_omega, rtol=1e-12)
            assert np.allclose(cg.d_theta[i], g.d_theta, rtol=1e-12)
            assert np.allclose(cg.d_sigma[i], g.d_sigma, rtol=1e-12)

    def test_cloud_states_match_single_ball(self, rng):
        balls = [GaussBall(rng.uniform(0.5, 2), rng.uniform(0.3, 1),
                           rng.uniform(-3, 3, 3)) for _ in range(3)]
        deforms = [random_field(rng, n=5) for _ in range(3)]
        cloud = DynamicCloud.from_balls(balls, deforms)
        cs = cloud_states_at(cloud, 0.61)
        for i in range(3):
            s = ball_state_at(balls[i], deforms[i], 0.61)
            assert cs.a0_t[i] == pytest.approx(s.a0_t, rel=1e-14)
            assert cs.p0_t[i] == pytest.approx(s.p0_t, rel=1e-14)
            assert np.allclose(cs.mu_t[i], s.mu_t, rtol=1e-14, atol=1e-15)

    def test_clamped_a0_has_zero_gradient(self):
        omega = np.zeros((5, 2))
        omega[0, :] = -0.8
        cloud = DynamicCloud(
            np.array([1.0]), np.array([0.5]), np.zeros((1, 3)),
            np.array([[0.4, 0.6]]), np.array([[0.3, 0.3]]),
            omega[None, :, :])
        t = 0.5
        floor = 1.0   # force the clamp: a0_t would be far below 1.0
        cg = cloud_state_grads(cloud, t, a0_floor=floor)
        assert np.all(cg.d_base[0, 0] == 0.0)
        assert np.all(cg.d_omega[0, 0] == 0.0)
        cs = cloud_states_at(cloud, t, a0_floor=floor)
        assert cs.a0_t[0] == floor


class TestLocalityAndDecoupling:
    def test_distant_bases_are_negligible(self, rng):
        n = 12
        theta = np.linspace(0, 1, n)
        sigma = np.full(n, 0.02)
        omega = rng.uniform(-1, 1, n)
        for t in rng.uniform(0, 1, 10):
            full = eval_H(t, omega, theta, sigma)
            near = np.abs(t - theta) <= 6 * sigma
            kept = eval_H(t, np.where(near, omega, 0.0), theta, sigma)
            assert abs(full - kept) < 1e-6

    def test_distant_frames_decouple(self):
        n = 21
        theta = np.linspace(0, 1, n)
        sigma = np.full(n, 0.05)
        base = np.zeros(n)
        for j in (0, n // 2, n - 1):
            bumped = base.copy()
            bumped[j] = 1.0
            for t in np.linspace(0, 1, 41):
                if abs(t - theta[j]) > 0.5:
                    delta = abs(eval_H(t, bumped, theta, sigma)
                                - eval_H(t, base, theta, sigma))
                    assert delta < 1e-6
