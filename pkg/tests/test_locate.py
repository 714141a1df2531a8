import numpy as np
import pytest
import warnings

from irsloc import make_scene
from irsloc.crb import fim_angles, fim_delay, trial_scene, Rectangle
from irsloc.geometry import geometry_params
from irsloc.locate import (
    HybridMeasurements,
    NearVerticalBearingWarning,
    NegativeSquareError,
    SingularSystemError,
    build_stage2_system,
    localize,
    stage1_segment_delays,
    stage2_solve,
    stage3_refine,
    _ls_solution,
    _stacked_wls,
)
from irsloc.streams import make_orthogonal_streams


def exact_measurements(scene, angle_var_scale=1.0):
    geo = geometry_params(scene)
    st = make_orthogonal_streams(scene)
    fd = fim_delay(scene, st, geo)
    fa, fo = fim_angles(scene, st, geo)
    cov_tau = np.diag(1.0 / np.diag(fd.matrix))
    cov_theta = np.diag(angle_var_scale / (np.diag(fa.matrix) + np.diag(fo.matrix)))
    return (
        HybridMeasurements(
            tau_hat=geo.cascade_delays.reshape(-1),
            theta_hat=geo.angles.copy(),
            cov_tau=cov_tau,
            cov_theta=cov_theta,
        ),
        geo,
    )


class TestStage1:
    def test_single_pair_halves_cascade(self):
        res = stage1_segment_delays(np.array([600e-9]), np.array([[1e-18]]))
        assert abs(res.segment_delays[0] - 300e-9) < 1e-21

    def test_consistent_vector_exact(self, table1_scene):
        geo = geometry_params(table1_scene)
        res = stage1_segment_delays(geo.cascade_delays.reshape(-1), np.eye(9) * 1e-18)
        np.testing.assert_allclose(res.segment_delays, geo.delays, atol=1e-15)
        assert res.residual_norm < 1e-15

    def test_identity_weight_matches_pseudo_inverse(self):
        rng = np.random.default_rng(0)
        tau = rng.uniform(100e-9, 400e-9, 9)
        res = stage1_segment_delays(tau, np.eye(9))
        a1 = np.zeros((9, 3))
        for l in range(3):
            for k in range(3):
                a1[l * 3 + k, l] += 1
                a1[l * 3 + k, k] += 1
        np.testing.assert_allclose(res.segment_delays, np.linalg.pinv(a1) @ tau, atol=1e-18)

    def test_normal_equation_orthogonality(self):
        rng = np.random.default_rng(1)
        tau = rng.uniform(100e-9, 400e-9, 9)
        q = np.diag(rng.uniform(0.5, 2.0, 9))
        res = stage1_segment_delays(tau, q)
        a1 = np.zeros((9, 3))
        for l in range(3):
            for k in range(3):
                a1[l * 3 + k, l] += 1
                a1[l * 3 + k, k] += 1
        residual = tau - a1 @ res.segment_delays
        # Q^-1-orthogonality of the residual to the column space
        np.testing.assert_allclose(a1.T @ np.linalg.solve(q, residual), 0.0, atol=1e-10)

    def test_singular_covariance_raises(self):
        with pytest.raises(SingularSystemError):
            stage1_segment_delays(np.ones(4) * 1e-7, np.zeros((4, 4)))


class TestStage2System:
    def test_truth_satisfies_rows(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        x, y = table1_scene.target_position
        truth = np.array([x, y, x**2 + y**2])
        np.testing.assert_allclose(system.a_tau @ truth, system.b_tau, rtol=1e-9)
        np.testing.assert_allclose(system.a_theta @ truth, system.b_theta, rtol=1e-9, atol=1e-9)

    def test_horizontal_bearing_row(self):
        scene = make_scene(
            irs_positions=[(50.0, 5.0), (-40.0, 6.0)], target_position=(5.0, 5.0), seed=0
        )
        meas, geo = exact_measurements(scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        # theta_1 = 0: the angle row reads -y_T = -y_I
        assert abs(system.a_theta[0, 0]) < 1e-12
        assert system.a_theta[0, 1] == -1.0
        assert abs(system.b_theta[0] - (-5.0)) < 1e-9

    def test_near_vertical_bearing_dropped(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        theta = meas.theta_hat.copy()
        theta[1] = np.pi / 2 - 1e-9
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            system = build_stage2_system(
                s1.segment_delays, theta, pos, s1.covariance, np.diag(meas.cov_theta)
            )
        assert any(issubclass(w.category, NearVerticalBearingWarning) for w in caught)
        assert system.angle_rows == (0, 2)

    def test_nan_bearing_contributes_delay_rows_only(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        theta = meas.theta_hat.copy()
        theta[0] = np.nan
        system = build_stage2_system(
            s1.segment_delays, theta, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        assert system.angle_rows == (1, 2)
        assert system.a_tau.shape[0] == 3

    def test_perturbation_variance_scaling(self):
        # var(b_theta row) tracks x_I^2 sec^4(theta) under angle jitter
        rng = np.random.default_rng(2)
        x_i, y_i = 30.0, -20.0
        theta0 = 0.8
        sigma = 1e-3
        draws = theta0 + sigma * rng.standard_normal(4000)
        b = x_i * np.tan(draws) - y_i
        var_emp = np.var(b)
        var_model = x_i**2 * sigma**2 / np.cos(theta0) ** 4
        assert abs(var_emp / var_model - 1.0) < 0.1


class TestStage2Solve:
    def test_zero_noise_fixed_point(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        state = stage2_solve(system)
        x, y = table1_scene.target_position
        np.testing.assert_allclose(state.x2, [x, y, x**2 + y**2], atol=1e-9)
        assert state.converged

    def test_restart_from_fixed_point_is_stationary(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        rng = np.random.default_rng(3)
        tau = meas.tau_hat + rng.standard_normal(9) * np.sqrt(np.diag(meas.cov_tau))
        theta = meas.theta_hat + rng.standard_normal(3) * np.sqrt(np.diag(meas.cov_theta))
        noisy = HybridMeasurements(tau, theta, meas.cov_tau, meas.cov_theta)
        s1 = stage1_segment_delays(noisy.tau_hat, noisy.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, noisy.theta_hat, pos, s1.covariance, np.diag(noisy.cov_theta)
        )
        state = stage2_solve(system)
        again = stage2_solve(system, init=state.x2)
        assert again.iterations == 1
        np.testing.assert_allclose(again.x2, state.x2, atol=1e-10)

    def test_collapse_to_ls_with_identity_weights(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        rng = np.random.default_rng(4)
        tau = meas.tau_hat + 1e-9 * rng.standard_normal(9)
        s1 = stage1_segment_delays(tau, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        from dataclasses import replace as dc_replace

        identity = dc_replace(
            system,
            r_b_tau=np.eye(3),
            r_b_theta=np.eye(len(system.angle_rows)),
            r_a_theta=np.zeros((len(system.angle_rows), len(system.angle_rows))),
        )
        state = stage2_solve(identity, handle_coefficient_error=False)
        np.testing.assert_allclose(state.x2, _ls_solution(identity), atol=1e-8)

    def test_too_few_rows_raises(self):
        meas = None
        a_tau = np.array([[2.0, 0.0, 1.0]])
        import irsloc.locate as loc

        system = loc.Stage2System(
            a_tau=a_tau,
            b_tau=np.array([1.0]),
            r_b_tau=np.eye(1),
            a_theta=np.zeros((1, 3)),
            b_theta=np.zeros(1),
            r_b_theta=np.eye(1),
            r_a_theta=np.eye(1),
            angle_rows=(0,),
        )
        with pytest.raises(SingularSystemError):
            stage2_solve(system)


class TestStage3:
    def test_self_consistent_stage2_is_unchanged(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        state = stage2_solve(system)
        cov2 = np.linalg.inv(state.normal_matrix)
        squares, position, clamped = stage3_refine(state, cov2)
        np.testing.assert_allclose(position, state.x2[:2], atol=1e-8)
        assert not clamped

    def test_sign_restoration_third_quadrant(self):
        scene = make_scene(
            irs_positions=[(10.0, 50.0), (10.0, -50.0), (50.0, 0.0)],
            target_position=(-6.0, -7.0),
            seed=5,
        )
        meas, geo = exact_measurements(scene)
        est = localize(meas, np.array([i.position for i in scene.irs]), "three-stage")
        assert est.position[0] < 0 and est.position[1] < 0
        np.testing.assert_allclose(est.position, [-6.0, -7.0], atol=1e-7)

    def test_negative_square_error(self):
        import irsloc.locate as loc

        # y and s rows trusted but inconsistent (y^2 > s): x^2 forced negative
        state = loc.Stage2State(
            x2=np.array([0.1, 10.0, 90.0]),
            delta_a=np.zeros(1),
            normal_matrix=np.eye(3),
            iterations=1,
            converged=True,
        )
        with pytest.raises(NegativeSquareError):
            stage3_refine(state, np.diag([1e4, 1e-8, 1e-8]))


class TestLocalize:
    @pytest.mark.parametrize("method", ["three-stage", "two-stage", "wls", "ls"])
    def test_exact_measurements_exact_position(self, method, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        est = localize(meas, np.array([i.position for i in table1_scene.irs]), method)
        err = np.linalg.norm(est.position - np.array(table1_scene.target_position))
        assert err < 1e-9
        assert est.method == method

    def test_unknown_method_rejected(self, table1_scene):
        meas, _ = exact_measurements(table1_scene)
        with pytest.raises(ValueError):
            localize(meas, np.array([i.position for i in table1_scene.irs]), "huh")

    @pytest.mark.xfail(
        strict=True,
        reason="conflicts with the stage-3 weighting that realizes the "
        "two-stage-to-three-stage MSE gain: with the full first-order "
        "covariance J cov(x2) J^T the refinement trades the quadratic "
        "consistency row against correlated x/y rows, and the median "
        "residual grows slightly; a diagonal weighting restores the "
        "residual decrease but erases the stage-3 MSE improvement",
    )
    def test_consistency_residual_median_decreases(self, table1_scene):
        rng = np.random.default_rng(6)
        meas0, geo = exact_measurements(table1_scene)
        pos = np.array([i.position for i in table1_scene.irs])
        r2, r3 = [], []
        for _ in range(300):
            tau = meas0.tau_hat + rng.standard_normal(9) * np.sqrt(np.diag(meas0.cov_tau))
            th = meas0.theta_hat + rng.standard_normal(3) * np.sqrt(np.diag(meas0.cov_theta))
            m = HybridMeasurements(tau, th, meas0.cov_tau, meas0.cov_theta)
            try:
                e2 = localize(m, pos, "two-stage")
                e3 = localize(m, pos, "three-stage")
            except (NegativeSquareError, SingularSystemError):
                continue
            r2.append(e2.consistency_residual)
            r3.append(e3.consistency_residual)
        assert np.median(r3) < np.median(r2)

    def test_translation_covariance_of_errors(self):
        # translating BS, IRSs, and target together leaves the error
        # distribution unchanged (paired seeds, same measurement noise)
        rng_master = np.random.default_rng(7)
        errs_a, errs_b = [], []
        shift = np.array([13.0, -7.5])
        for trial in range(200):
            noise_seed = int(rng_master.integers(2**31))
            for shifted, bucket in ((False, errs_a), (True, errs_b)):
                offset = shift if shifted else np.zeros(2)
                scene = make_scene(
                    irs_positions=[
                        (10.0 + offset[0], 50.0 + offset[1]),
                        (10.0 + offset[0], -50.0 + offset[1]),
                        (50.0 + offset[0], 0.0 + offset[1]),
                    ],
                    target_position=(5.0 + offset[0], 5.0 + offset[1]),
                    bs_position=(0.0 + offset[0], 0.0 + offset[1]),
                    seed=17,
                )
                geo = geometry_params(scene)
                st = make_orthogonal_streams(scene)
                fd = fim_delay(scene, st, geo)
                fa, fo = fim_angles(scene, st, geo)
                cov_tau = np.diag(1.0 / np.diag(fd.matrix))
                cov_theta = np.diag(1.0 / (np.diag(fa.matrix) + np.diag(fo.matrix)))
                rng = np.random.default_rng(noise_seed)
                tau = geo.cascade_delays.reshape(-1) + rng.standard_normal(9) * np.sqrt(
                    np.diag(cov_tau)
                )
                th = geo.angles + rng.standard_normal(3) * np.sqrt(np.diag(cov_theta))
                m = HybridMeasurements(tau, th, cov_tau, cov_theta)
                est = localize(m, np.array([i.position for i in scene.irs]), "three-stage")
                bucket.append(est.position - np.array(scene.target_position))
        errs_a, errs_b = np.array(errs_a), np.array(errs_b)
        # identical noise draws, rigidly translated geometry: errors match closely
        assert np.median(np.linalg.norm(errs_a - errs_b, axis=1)) < 0.1 * np.median(
            np.linalg.norm(errs_a, axis=1)
        )

    def test_wls_identity_reduces_to_ls(self, table1_scene):
        meas, geo = exact_measurements(table1_scene)
        s1 = stage1_segment_delays(meas.tau_hat, meas.cov_tau)
        pos = np.array([i.position for i in table1_scene.irs])
        system = build_stage2_system(
            s1.segment_delays, meas.theta_hat, pos, s1.covariance, np.diag(meas.cov_theta)
        )
        from dataclasses import replace as dc_replace

        identity = dc_replace(
            system, r_b_tau=np.eye(3), r_b_theta=np.eye(len(system.angle_rows))
        )
        x_wls, _ = _stacked_wls(identity)
        np.testing.assert_allclose(x_wls, _ls_solution(identity), atol=1e-9)
