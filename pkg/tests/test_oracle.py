"""Physics surrogate invariants and the SWDS1 dataset format."""

import numpy as np
import pytest
from scipy.integrate import simpson

from hydronet import oracle
from hydronet.loading import DEFAULT_GEOMETRY, StormParams

P_REF = StormParams(lam=0.14, k=1.9, theta=10.0, c0=1.3, kd=0.8)


def tiny_config(**overrides):
    defaults = dict(n_cases=6, n_classes=2, n_times=12, n_points=48, seed=7)
    defaults.update(overrides)
    return oracle.OracleConfig(**defaults)


class TestTankODE:
    def test_no_settling_relaxes_monotonically_to_inlet_concentration(self):
        g = DEFAULT_GEOMETRY
        state = oracle.integrate_tank(lambda t: np.full_like(np.asarray(t, float), 2e-3),
                                      lambda t: np.full_like(np.asarray(t, float), 1.5),
                                      w_s=0.0, t_end_s=20000.0, geometry=g)
        c = state.values
        assert np.all(np.diff(c) >= -1e-12)
        assert c[-1] == pytest.approx(1.5, rel=1e-3)
        assert np.all(c <= 1.5 + 1e-12)

    def test_steady_state_matches_analytic_balance(self):
        g = DEFAULT_GEOMETRY
        q_si, c_in, w_s = 1.5e-3, 2.0, 1e-3
        qv = q_si / g.volume
        expected = c_in * qv / (qv + w_s / g.depth)
        state = oracle.integrate_tank(lambda t: np.full_like(np.asarray(t, float), q_si),
                                      lambda t: np.full_like(np.asarray(t, float), c_in),
                                      w_s=w_s, t_end_s=40000.0, geometry=g)
        assert state.values[-1] == pytest.approx(expected, rel=1e-6)

    def test_no_inflow_stays_empty(self):
        state = oracle.integrate_tank(lambda t: np.zeros_like(np.asarray(t, float)),
                                      lambda t: np.ones_like(np.asarray(t, float)),
                                      w_s=1e-4, t_end_s=3600.0)
        assert np.all(state.values == 0.0)

    def test_rk4_step_halving_drift_on_smooth_corners(self):
        # Corners with k > 1.1 have a smooth right-hand side and show true
        # 4th-order convergence.  The k = 1.1 corners put a t^0.1 cusp at
        # t = 0, where fixed-step RK4 degrades to ~order 1; those are
        # exercised (and bounded) separately below.
        grid = np.array([0.0, 3600.0])
        for lam in (0.0017, 0.2012):
            for theta in (0.23, 51.5):
                for c0 in (0.1072, 3.6963):
                    for kd in (0.5, 1.0):
                        p = StormParams(lam, 99.3, theta, c0, kd)
                        for w_s in (1e-6, 3.16e-4):
                            coarse = oracle.cstr_solve(p, w_s, grid, ode_step_s=1.0)
                            fine = oracle.cstr_solve(p, w_s, grid, ode_step_s=0.5)
                            a, b = coarse.values[-1], fine.at(3600.0)
                            assert abs(a - b) <= 1e-8 * max(abs(b), 1e-30)

    def test_rk4_cusp_corner_error_is_bounded_and_first_order(self):
        p = StormParams(0.0017, 1.1, 0.23, 3.6963, 1.0)
        grid = np.array([0.0, 3600.0])
        values = [oracle.cstr_solve(p, 1e-6, grid, ode_step_s=h).at(3600.0)
                  for h in (1.0, 0.5, 0.25)]
        drift_1 = abs(values[0] - values[1]) / abs(values[1])
        drift_2 = abs(values[1] - values[2]) / abs(values[2])
        assert drift_1 < 0.01
        assert drift_2 < drift_1

    def test_mass_sanity_outflow_never_exceeds_inflow(self):
        p = P_REF
        t_end = 7200.0
        state = oracle.cstr_solve(p, 0.0, np.array([0.0, t_end]))
        t = state.times
        q = np.asarray(oracle.inflow_si(p, t))
        inflow_mass = np.trapezoid(q * np.asarray(oracle.inlet_concentration(p, t)), t)
        outflow_mass = np.trapezoid(q * state.values, t)
        assert outflow_mass <= inflow_mass

    def test_grid_must_ascend_from_zero(self):
        with pytest.raises(ValueError):
            oracle.cstr_solve(P_REF, 1e-4, np.array([-1.0, 10.0]))


class TestFieldEval:
    def test_inlet_probe_sees_inlet_exactly(self):
        g = DEFAULT_GEOMETRY
        state = oracle.cstr_solve(P_REF, 3.16e-4, np.array([0.0, 3600.0]))
        probe = np.array([[-g.radius, 0.0, g.jet_height]])
        for t in (60.0, 600.0, 1800.0):
            u, c = oracle.field_eval(P_REF, 3.16e-4, t, probe, state)
            assert c[0] == pytest.approx(float(oracle.inlet_concentration(P_REF, t)), rel=1e-12)
            assert u[0] == pytest.approx(float(oracle.inflow_si(P_REF, t)) / g.pipe_area,
                                         rel=1e-12)

    def test_initial_field_is_jet_weighted_initial_concentration(self):
        g = DEFAULT_GEOMETRY
        state = oracle.cstr_solve(P_REF, 1e-4, np.array([0.0, 3600.0]))
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(-0.3, 0.3, 20), rng.uniform(-0.3, 0.3, 20),
                               rng.uniform(0.0, g.depth, 20)])
        w_jet, _ = oracle._jet_profile(g, pts)
        _, c = oracle.field_eval(P_REF, 1e-4, 0.0, pts, state)
        assert np.allclose(c, w_jet * P_REF.c0, rtol=1e-12, atol=0)

    @pytest.mark.parametrize("kappa", [1e-12, 1e-7, 1e-3, 0.5, 2.0, 8.0])
    def test_vertical_settling_profile_averages_to_one(self, kappa):
        g = DEFAULT_GEOMETRY
        z = np.linspace(0.0, g.depth, 1001)
        s = oracle.vertical_settling_profile(kappa, z, g.depth)
        avg = simpson(s, x=z) / g.depth
        assert avg == pytest.approx(1.0, abs=1e-6)

    def test_concentration_scales_linearly_with_initial_concentration(self):
        alpha = 3.0
        scaled = StormParams(P_REF.lam, P_REF.k, P_REF.theta, alpha * P_REF.c0, P_REF.kd)
        grid = np.array([0.0, 3600.0])
        s_base = oracle.cstr_solve(P_REF, 3.16e-4, grid)
        s_scaled = oracle.cstr_solve(scaled, 3.16e-4, grid)
        pts = np.array([[0.1, -0.2, 0.4], [-0.4, 0.0, 1.0], [0.0, 0.3, 0.7]])
        times = np.array([120.0, 600.0, 2400.0])
        u1, c1 = oracle.field_eval(P_REF, 3.16e-4, times, pts, s_base)
        u2, c2 = oracle.field_eval(scaled, 3.16e-4, times, pts, s_scaled)
        assert np.allclose(c2, alpha * c1, rtol=1e-9, atol=0)
        assert np.array_equal(u1, u2)
        # therefore dc/dC0 = c / C0 holds exactly for the physics model
        assert np.allclose((c2 - c1) / ((alpha - 1.0) * P_REF.c0), c1 / P_REF.c0,
                           rtol=1e-9, atol=1e-300)

    def test_fields_are_nonnegative(self):
        cfg = tiny_config()
        ds = oracle.generate_dataset(cfg)
        assert np.all(ds.solutions >= 0.0)

    def test_point_outside_cylinder_rejected(self):
        state = oracle.cstr_solve(P_REF, 1e-4, np.array([0.0, 100.0]))
        with pytest.raises(ValueError, match="outside"):
            oracle.field_eval(P_REF, 1e-4, 50.0, np.array([[2.0, 0.0, 0.5]]), state)
        with pytest.raises(ValueError, match="outside"):
            oracle.field_eval(P_REF, 1e-4, 50.0, np.array([[0.0, 0.0, 5.0]]), state)


class TestDataset:
    def test_dims_and_layout(self):
        cfg = tiny_config()
        ds = oracle.generate_dataset(cfg)
        assert ds.solutions.shape == (6, 2, 12, 48, 2)
        assert ds.solutions.dtype == np.float32
        assert ds.coords.shape == (6, 48, 3)
        assert ds.feature_matrix_rows == 6 * 12 * 48
        assert ds.times[0] == pytest.approx(300.0)
        assert ds.times[-1] == pytest.approx(3600.0)

    def test_spatial_sampling_varies_between_cases(self):
        ds = oracle.generate_dataset(tiny_config())
        assert not np.array_equal(ds.coords[0], ds.coords[1])

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = tiny_config()
        p1, p2 = tmp_path / "a.swds", tmp_path / "b.swds"
        oracle.generate_dataset(cfg, p1)
        oracle.generate_dataset(cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_arithmetic(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "d.swds"
        oracle.generate_dataset(cfg, path)
        m, c, o, n = cfg.n_cases, cfg.n_classes, cfg.n_times, cfg.n_points
        expected = (len(oracle.SWDS_MAGIC) + 16 + 8 * (m * 5 + c + o + m * n * 3)
                    + 4 * (m * c * o * n * 2))
        assert path.stat().st_size == expected

    def test_round_trip(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "d.swds"
        ds = oracle.generate_dataset(cfg, path)
        back = oracle.read_swds1(path)
        assert np.array_equal(back.params, ds.params)
        assert np.array_equal(back.classes, ds.classes)
        assert np.array_equal(back.times, ds.times)
        assert np.array_equal(back.coords, ds.coords)
        assert np.array_equal(back.solutions, ds.solutions)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.swds"
        path.write_bytes(b"NOTSWDS" + b"\x00" * 64)
        with pytest.raises(ValueError, match="SWDS1"):
            oracle.read_swds1(path)

    def test_full_scale_dims_accepted_as_config(self):
        cfg = oracle.OracleConfig(n_cases=640, n_classes=9, n_times=360, n_points=8000)
        assert cfg.output_interval_s == pytest.approx(10.0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            oracle.OracleConfig(n_classes=1)
        with pytest.raises(ValueError):
            oracle.OracleConfig(ode_step_s=0.0)


class TestOracleSurrogate:
    def test_predict_case_matches_stored_solutions(self):
        ds = oracle.generate_dataset(tiny_config())
        surr = oracle.OracleSurrogate()
        pred = surr.predict_case(ds.params[2], ds.classes, ds.times, ds.coords[2])
        stored = np.asarray(ds.solutions[2], dtype=np.float64)
        scale = max(stored.max(), 1e-30)
        assert np.max(np.abs(pred - stored)) / scale < 1e-6  # f32 storage rounding
