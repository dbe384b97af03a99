import numpy as np
import pytest

from pacloud.core import Box, DynamicCloud, GaussBall, ReconConfig, \
    SignalSet
from pacloud.deformation import CloudState, cloud_state_grads, \
    cloud_states_at, eval_basis
from pacloud.evaluation import GridSpec
from pacloud.geometry import simulate_dataset, spherical_array
from pacloud.radiator import accumulate_frame_grads, compute_time_window, \
    forward_frame
from pacloud.reconstruction import (AdamState, ParamGroup, ParamGroups,
                                    adam_step, dynamic_reconstruct, l2_loss,
                                    scheduled_lr, static_reconstruct,
                                    ubp_reconstruct)

from oracles import fd_gradient, l2_loss_loops, rel_err


class TestL2Loss:
    def test_identical_inputs(self, rng):
        x = rng.normal(size=(4, 7))
        assert l2_loss(x, x) == 0.0

    def test_constant_offset(self):
        o = np.zeros((2, 4))
        assert l2_loss(o + 1.0, o) == 4.0

    def test_matches_loop_oracle(self, rng):
        p = rng.normal(size=(5, 9))
        o = rng.normal(size=(5, 9))
        assert l2_loss(p, o) == pytest.approx(l2_loss_loops(p, o), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l2_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSchedule:
    def test_closed_form_everywhere(self):
        for it in range(500):
            lr = scheduled_lr(5e-4, it, 160, 0.1)
            assert lr == 5e-4 * 0.1 ** (it // 160)

    def test_decay_boundaries(self):
        assert scheduled_lr(1.0, 0, 160, 0.1) == 1.0
        assert scheduled_lr(1.0, 159, 160, 0.1) == 1.0
        assert scheduled_lr(1.0, 160, 160, 0.1) == 0.1
        assert scheduled_lr(1.0, 320, 160, 0.1) == pytest.approx(0.01)


class TestAdamStep:
    def test_zero_gradient_is_fixed_point(self):
        p = np.array([1.5, -2.0])
        st = AdamState.like(p)
        adam_step(p, np.zeros(2), st, lr=0.1)
        assert np.array_equal(p, [1.5, -2.0])

    def test_unit_first_step(self):
        # bias-corrected first step moves by ~lr against the gradient sign
        p = np.array([3.0])
        st = AdamState.like(p)
        adam_step(p, np.array([1.0]), st, lr=0.1)
        assert p[0] == pytest.approx(2.9, abs=1e-6)

    def test_nonfinite_gradient_names_group(self):
        p = np.array([1.0])
        st = AdamState.like(p)
        with pytest.raises(ValueError, match="pressure"):
            adam_step(p, np.array([np.nan]), st, lr=0.1, group="pressure")


class TestParamGroups:
    def test_partition_enforced(self):
        arr = np.zeros(3)
        groups = {
            "coords": ParamGroup("coords", 1e-3, {"mu": np.zeros((3, 3))}),
            "pressure": ParamGroup("pressure", 1e-3, {"p0": arr}),
            "std": ParamGroup("std", 1e-3, {"a0": arr}),
            "deform": ParamGroup("deform", 1e-3, {}),
        }
        with pytest.raises(ValueError, match="more than one group"):
            ParamGroups(groups)

    def test_group_names_fixed(self):
        with pytest.raises(ValueError):
            ParamGroups({"coords": ParamGroup("coords", 1e-3, {})})

    def test_scheduled_lrs(self):
        groups = ParamGroups({
            "coords": ParamGroup("coords", 4.0, {}),
            "pressure": ParamGroup("pressure", 2.0, {}),
            "std": ParamGroup("std", 1.0, {}),
            "deform": ParamGroup("deform", 8.0, {}),
        })
        lrs = groups.lrs_at(160, 160, 0.1)
        assert lrs == {"coords": 0.4, "pressure": 0.2, "std": 0.1,
                       "deform": 0.8}


@pytest.fixture(scope="module")
def single_ball_setup():
    roi = Box.cube(6.0)
    arr0 = spherical_array(32, 30.0, sound_speed=1.5, sample_rate=8.0)
    t0, n = compute_time_window(arr0, roi, 1.0)
    array = arr0.with_window(t0, n)
    truth = GaussBall(1.0, 0.8, (1.0, -2.0, 0.5))
    state = CloudState(np.array([truth.a0]), np.array([truth.p0]),
                       np.array([truth.mu]))
    observed = simulate_dataset([state], array).data[:, 0, :]
    return roi, array, truth, observed


class TestStaticReconstruct:
    def test_single_ball_round_trip(self, single_ball_setup):
        roi, array, truth, observed = single_ball_setup
        cfg = ReconConfig(lr_coords=2e-2, lr_pressure=5e-2, lr_std=5e-3,
                          lr_deform=1e-3, static_iters=480, prune_every=40,
                          prune_threshold=0.6, step_size=240, init_pitch=1.6,
                          seed=3)
        log = []
        balls = static_reconstruct(observed, array, cfg, roi,
                                   progress=log.append)
        dominant = max(balls, key=lambda b: b.p0)
        assert np.linalg.norm(dominant.mu - truth.mu) < 0.5 * truth.a0
        assert abs(dominant.p0 - truth.p0) < 0.1 * truth.p0
        # pruning safety: counts never increase, survivors above threshold
        counts = [r["n_balls"] for r in log]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        p0s = np.array([b.p0 for b in balls])
        assert np.min(p0s) > cfg.prune_threshold * np.max(p0s)

    def test_loss_decreases(self, single_ball_setup):
        # the 50-iteration windowed-trend property is asserted on the
        # desk-scale phantom in the acceptance suite; here just require
        # convergence by orders of magnitude
        roi, array, truth, observed = single_ball_setup
        cfg = ReconConfig(lr_coords=2e-2, lr_pressure=5e-2, lr_std=5e-3,
                          lr_deform=1e-3, static_iters=240, prune_every=40,
                          prune_threshold=0.6, step_size=240, init_pitch=1.6,
                          seed=3)
        log = []
        static_reconstruct(observed, array, cfg, roi, progress=log.append)
        losses = [r["loss"] for r in log]
        assert losses[-1] < 1e-3 * losses[0]

    def test_all_zero_data_exhausts_cloud(self, single_ball_setup):
        roi, array, _, observed = single_ball_setup
        cfg = ReconConfig(static_iters=60, prune_every=20, init_pitch=3.0)
        with pytest.raises(RuntimeError, match="prune_threshold"):
            static_reconstruct(np.zeros_like(observed), array, cfg, roi)

    def test_shape_mismatch_rejected(self, single_ball_setup):
        roi, array, _, observed = single_ball_setup
        cfg = ReconConfig()
        with pytest.raises(ValueError):
            static_reconstruct(observed[:, :-1], array, cfg, roi)


def _pulsed_frames(p0, a0, mu, schedule, pulsed):
    frames = []
    scale = np.where(pulsed, 1.0, 0.0)
    for s in schedule:
        f = 1.0 + scale * (s - 1.0)
        frames.append(CloudState(a0 * f, p0 * f, mu * f[:, None]))
    return frames


@pytest.fixture(scope="module")
def dynamic_setup():
    rng = np.random.default_rng(5)
    roi = Box.cube(6.0)
    arr0 = spherical_array(32, 30.0, sound_speed=1.5, sample_rate=8.0)
    t0, n = compute_time_window(arr0, roi, 1.0)
    array = arr0.with_window(t0, n)
    p0 = rng.uniform(0.5, 1.0, 4)
    a0 = rng.uniform(0.5, 0.9, 4)
    mu = rng.uniform(-4, 4, (4, 3))
    return roi, array, p0, a0, mu


class TestDynamicReconstruct:
    def test_static_data_keeps_identity_deformation(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        frame = CloudState(a0, p0, mu)
        observed = simulate_dataset([frame] * 5, array)
        init = [GaussBall(p0[i], a0[i], mu[i]) for i in range(4)]
        cfg = ReconConfig(lr_coords=5e-3, lr_pressure=2e-2, lr_std=2e-3,
                          lr_deform=5e-3, dynamic_iters=120, n_basis=9,
                          seed=2)
        cloud = dynamic_reconstruct(observed, array, init, cfg)
        # perfectly initialized static scene: zero residual keeps omega at 0
        assert np.all(cloud.omega == 0.0)
        for t in np.linspace(0, 1, 21):
            b = eval_basis(t, cloud.theta, cloud.sigma)
            h = np.einsum("bcn,bn->bc", cloud.omega, b)
            assert np.max(np.abs(h)) < 1e-3

    def test_two_frame_fit_reduces_loss(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        frames = _pulsed_frames(p0, a0, mu, [1.0, 1.3],
                                np.array([True, True, False, False]))
        observed = simulate_dataset(frames, array)
        init = [GaussBall(p0[i], a0[i], mu[i]) for i in range(4)]
        cfg = ReconConfig(lr_coords=5e-3, lr_pressure=2e-2, lr_std=2e-3,
                          lr_deform=5e-3, dynamic_iters=240, n_basis=9,
                          seed=2)
        log = []
        dynamic_reconstruct(observed, array, init, cfg, progress=log.append)
        losses = [r["loss"] for r in log]
        assert losses[-1] < 0.1 * losses[0]

    def test_recovers_pulsation_states(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        schedule = 1.0 + 0.3 * np.sin(2 * np.pi * np.linspace(0, 1, 6))
        pulsed = np.array([True, True, False, False])
        frames = _pulsed_frames(p0, a0, mu, schedule, pulsed)
        observed = simulate_dataset(frames, array)
        init = [GaussBall(p0[i], a0[i], mu[i]) for i in range(4)]
        cfg = ReconConfig(lr_coords=5e-3, lr_pressure=2e-2, lr_std=2e-3,
                          lr_deform=5e-3, dynamic_iters=320, n_basis=17,
                          seed=2)
        cloud = dynamic_reconstruct(observed, array, init, cfg)
        for k, t in enumerate(np.linspace(0, 1, 6)):
            st = cloud_states_at(cloud, float(t), cfg.coord_mode,
                                 a0_floor=cfg.a0_floor)
            assert np.max(np.abs(st.p0_t - frames[k].p0_t)) < 0.05

    def test_deterministic_given_seed(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        frames = _pulsed_frames(p0, a0, mu, [1.0, 1.2, 1.0],
                                np.array([True, False, True, False]))
        observed = simulate_dataset(frames, array)
        init = [GaussBall(p0[i], a0[i], mu[i]) for i in range(4)]
        cfg = ReconConfig(lr_coords=5e-3, lr_pressure=2e-2, lr_std=2e-3,
                          lr_deform=5e-3, dynamic_iters=60, n_basis=9,
                          frame_batch=2, seed=11)
        a = dynamic_reconstruct(observed, array, init, cfg)
        b = dynamic_reconstruct(observed, array, init, cfg)
        for name in ("p0", "a0", "mu", "theta", "sigma", "omega"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_roi_drift_warns_but_returns(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        frame = CloudState(a0, p0, mu)
        observed = simulate_dataset([frame] * 2, array)
        init = [GaussBall(p0[i], a0[i], mu[i]) for i in range(4)]
        cfg = ReconConfig(dynamic_iters=2, n_basis=3)
        tight = Box.cube(0.5)   # every baseline center sits outside
        with pytest.warns(RuntimeWarning, match="outside the region"):
            cloud = dynamic_reconstruct(observed, array, init, cfg,
                                        roi=tight)
        assert len(cloud) == 4

    def test_input_contracts(self, dynamic_setup):
        _, array, p0, a0, mu = dynamic_setup
        frame = CloudState(a0, p0, mu)
        observed = simulate_dataset([frame] * 3, array)
        cfg = ReconConfig(dynamic_iters=2)
        with pytest.raises(ValueError, match="nonempty"):
            dynamic_reconstruct(observed, array, [], cfg)
        single = SignalSet(observed.data[:, :1, :], np.zeros(1))
        with pytest.raises(ValueError, match="2 frames"):
            dynamic_reconstruct(single, array,
                                [GaussBall(1, 1, (0, 0, 0))], cfg)

    def test_end_to_end_gradient_composition(self, dynamic_setup):
        # frozen 2-ball problem over 2 frames: assembled gradient vs FD
        _, array, p0, a0, mu = dynamic_setup
        rng = np.random.default_rng(9)
        n_balls, nb = 2, 3
        observed = rng.normal(0, 1e-4, (array.n_sensors, 2,
                                        array.n_samples))
        times = [0.0, 1.0]
        theta = np.tile(np.linspace(0, 1, nb), (n_balls, 1))
        sigma = np.full((n_balls, nb), 0.4)
        omega = rng.uniform(-0.2, 0.2, (n_balls, 5, nb))
        x0 = np.concatenate([p0[:2], a0[:2], mu[:2].ravel(), theta.ravel(),
                             sigma.ravel(), omega.ravel()])

        def unpack(x):
            i = 0
            _p0 = x[i:i + 2]; i += 2
            _a0 = x[i:i + 2]; i += 2
            _mu = x[i:i + 6].reshape(2, 3); i += 6
            _th = x[i:i + 2 * nb].reshape(2, nb); i += 2 * nb
            _sg = x[i:i + 2 * nb].reshape(2, nb); i += 2 * nb
            return DynamicCloud(_p0, _a0, _mu, _th, _sg,
                                x[i:].reshape(2, 5, nb))

        def total_loss(x):
            cloud = unpack(x)
            total = 0.0
            for k, t in enumerate(times):
                state = cloud_states_at(cloud, t)
                pred = forward_frame(state, array, exact=True)
                total += 0.5 * float(np.sum((pred - observed[:, k]) ** 2))
            return total

        cloud = unpack(x0)
        ana = None
        for k, t in enumerate(times):
            state = cloud_states_at(cloud, t)
            sg = cloud_state_grads(cloud, t)
            residual = forward_frame(state, array, exact=True) \
                - observed[:, k]
            g = accumulate_frame_grads(state, sg, array, residual,
                                       exact=True)
            flat = np.concatenate([g.p0, g.a0, g.mu.ravel(),
                                   g.theta.ravel(), g.sigma.ravel(),
                                   g.omega.ravel()])
            ana = flat if ana is None else ana + flat
        num = fd_gradient(total_loss, x0, 1e-5)
        assert np.max(rel_err(ana, num, floor_rel=1e-5)) < 1e-4


class TestUbpReconstruct:
    def test_zero_traces_zero_grid(self):
        array = spherical_array(16, 30.0, sample_rate=8.0, n_samples=200,
                                t_start=10.0)
        spec = GridSpec((-2.0, -2.0, -2.0), 0.5, (9, 9, 9))
        grid = ubp_reconstruct(np.zeros((16, 200)), array, spec)
        assert np.all(grid.values == 0.0)

    def test_single_ball_peak_within_one_voxel(self):
        region = Box.cube(6.4)
        arr0 = spherical_array(128, 30.0, sound_speed=1.5, sample_rate=10.0)
        t0, n = compute_time_window(arr0, region, 1.0)
        array = arr0.with_window(t0, n)
        gspec = GridSpec.from_box(region, 0.4)
        mu = np.array([1.3, -2.1, 0.9])
        state = CloudState(np.array([0.8]), np.array([1.0]), mu[None, :])
        observed = simulate_dataset([state], array)
        grid = ubp_reconstruct(observed.data[:, 0, :], array, gspec)
        idx = np.unravel_index(np.argmax(grid.values), grid.values.shape)
        center = gspec.origin + gspec.spacing * np.array(idx)
        assert np.all(np.abs(center - mu) <= gspec.spacing + 1e-12)

    def test_window_coverage_enforced(self):
        array = spherical_array(16, 30.0, sample_rate=8.0, n_samples=16,
                                t_start=10.0)
        spec = GridSpec((-2.0, -2.0, -2.0), 0.5, (9, 9, 9))
        with pytest.raises(ValueError, match="does not cover"):
            ubp_reconstruct(np.zeros((16, 16)), array, spec)
