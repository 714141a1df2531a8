import numpy as np
import pytest

from irsloc.anm import (
    AdmmOptions,
    BlockKind,
    DegenerateToeplitzError,
    IllConditionedError,
    admm_joint_full_rank,
    admm_joint_reduced_rank,
    admm_rank1,
    admm_solve,
    angle_from_toeplitz,
    preprocess_observation,
    psd_project,
    toeplitz,
    toeplitz_adjoint,
    toeplitz_weights,
)
from irsloc.delay import CascadeObservation
from irsloc.geometry import steering_vector
from irsloc.streams import RankClass

RNG = np.random.default_rng(20)


def random_hermitian(n, rng):
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return x + x.conj().T


def make_observation(rank, m=8, n=8, n_s=24, th_aoa=0.3, th_aod=-0.5, noise=0.0, rng=RNG):
    u = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    v = rng.standard_normal((n_s, rank)) + 1j * rng.standard_normal((n_s, rank))
    s = u @ v.conj().T / np.sqrt(n * n_s)
    if rank == n:
        cls = RankClass.FULL
    elif rank == 1:
        cls = RankClass.RANK_ONE
    else:
        cls = RankClass.INTERMEDIATE
    r = 2.0 * np.outer(steering_vector(th_aoa, m), steering_vector(th_aod, n).conj()) @ s
    if noise:
        r = r + noise * (rng.standard_normal(r.shape) + 1j * rng.standard_normal(r.shape))
    return CascadeObservation((0, 0), r, s, cls, float(np.linalg.norm(r) ** 2))


class TestToeplitz:
    def test_unit_first_row_gives_identity(self):
        np.testing.assert_array_equal(toeplitz(np.array([1.0, 0.0, 0.0])), np.eye(3))

    def test_scaled_identity(self):
        np.testing.assert_array_equal(
            toeplitz(np.array([2.5, 0.0, 0.0, 0.0])), 2.5 * np.eye(4)
        )

    def test_rejects_complex_leading_entry(self):
        with pytest.raises(ValueError):
            toeplitz(np.array([1.0 + 0.1j, 0.0]))

    def test_hermitian_toeplitz_structure(self):
        u = np.array([1.0, 0.5 + 0.2j, -0.1 + 0.7j])
        t = toeplitz(u)
        np.testing.assert_allclose(t, t.conj().T)
        assert t[0, 1] == u[1] and t[1, 2] == u[1] and t[0, 2] == u[2]
        assert t[1, 0] == np.conj(u[1])


class TestToeplitzAdjoint:
    def test_identity_input(self):
        np.testing.assert_allclose(toeplitz_adjoint(np.eye(4)), [4, 0, 0, 0])

    def test_all_ones_3x3(self):
        np.testing.assert_allclose(toeplitz_adjoint(np.ones((3, 3))), [3, 4, 2])

    def test_adjoint_identity(self):
        # <T(u), X> = Re <u, f(X)> with the doubled superdiagonal weighting
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 17))
            u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            u[0] = u[0].real
            x = random_hermitian(n, rng)
            lhs = np.real(np.trace(toeplitz(u).conj().T @ x))
            rhs = np.real(np.vdot(u, toeplitz_adjoint(x)))
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))

    def test_round_trip_weights(self):
        rng = np.random.default_rng(2)
        for n in (2, 5, 9):
            u = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            u[0] = u[0].real
            back = toeplitz_adjoint(toeplitz(u))
            np.testing.assert_allclose(back, toeplitz_weights(n) * u, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            toeplitz_adjoint(np.ones((2, 3)))


class TestPsdProject:
    def test_clamps_negative_eigenvalue(self):
        np.testing.assert_allclose(
            psd_project(np.diag([2.0, -1.0])), np.diag([2.0, 0.0]), atol=1e-14
        )

    def test_idempotent_on_psd(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5))
        psd = a @ a.conj().T
        np.testing.assert_allclose(psd_project(psd), psd, atol=1e-10)

    def test_projection_distance_equals_negative_part(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = random_hermitian(6, rng)
            vals = np.linalg.eigvalsh(x)
            expected = np.linalg.norm(np.minimum(vals, 0.0))
            assert abs(np.linalg.norm(psd_project(x) - x) - expected) < 1e-10


class TestAdmmSolvers:
    def test_full_rank_noiseless_angle(self):
        obs = [make_observation(8, th_aoa=0.3, th_aod=t) for t in (-0.5, 0.2, 0.9)]
        res = admm_joint_full_rank(obs)
        theta, low = angle_from_toeplitz(res.v, 8)
        assert abs(theta - 0.3) < 1e-3
        assert not low

    def test_reduced_rank_noiseless_angle(self):
        obs = [make_observation(3, th_aoa=0.3, th_aod=t) for t in (-0.5, 0.2, 0.9)]
        res = admm_joint_reduced_rank(obs)
        theta, _ = angle_from_toeplitz(res.v, 8)
        assert abs(theta - 0.3) < 1e-3
        for p in res.blocks:
            assert np.trace(p).real >= -1e-10

    def test_rank1_noiseless_angle_and_flag(self):
        obs = [make_observation(1, th_aoa=0.3, th_aod=t) for t in (-0.5, 0.2, 0.9)]
        res, aod_unavailable = admm_rank1(obs)
        theta, _ = angle_from_toeplitz(res.v, 8)
        assert abs(theta - 0.3) < 1e-3
        assert aod_unavailable
        for p in res.blocks:
            assert p >= -1e-12

    def test_rank_class_preconditions(self):
        full = make_observation(8)
        with pytest.raises(ValueError):
            admm_joint_reduced_rank([full])
        with pytest.raises(ValueError):
            admm_rank1([full])

    def test_degenerate_reduced_rank_matches_full(self):
        # rank equals N: both pipelines solve the same data
        obs_full = make_observation(8, th_aoa=0.4, th_aod=0.1, noise=0.01)
        obs_dense = CascadeObservation(
            obs_full.pair,
            obs_full.matrix,
            obs_full.effective_signal,
            RankClass.INTERMEDIATE,
            obs_full.energy,
        )
        res_full = admm_joint_full_rank([obs_full])
        res_dense = admm_joint_reduced_rank([obs_dense])
        t1, _ = angle_from_toeplitz(res_full.v, 8)
        t2, _ = angle_from_toeplitz(res_dense.v, 8)
        assert abs(t1 - t2) < 1e-4

    def test_duplicated_observation_equals_doubled_weight(self):
        obs = make_observation(8, noise=0.05)
        t, kind = preprocess_observation(obs)
        res_dup = admm_solve([t, t], [obs.energy, obs.energy], [kind, kind])
        res_w = admm_solve([t], [2.0 * obs.energy], [kind])
        np.testing.assert_allclose(res_dup.v, res_w.v, atol=1e-7)

    def test_batch_order_invariance(self):
        obs = [make_observation(8, th_aod=t, noise=0.02) for t in (-0.7, 0.1, 0.8)]
        targets, kinds, weights = [], [], []
        for o in obs:
            t, k = preprocess_observation(o)
            targets.append(t)
            kinds.append(k)
            weights.append(o.energy)
        res_fwd = admm_solve(targets, weights, kinds)
        res_rev = admm_solve(targets[::-1], weights[::-1], kinds[::-1])
        np.testing.assert_allclose(res_fwd.v, res_rev.v, atol=1e-9)

    def test_primal_residual_noiseless_single_source(self):
        t = np.outer(steering_vector(0.4, 8), steering_vector(0.1, 8).conj())
        res = admm_solve(
            [t], [1.0], [BlockKind.TOEPLITZ], AdmmOptions(eps_x=0.0, eps_z=0.0, max_iter=2000)
        )
        assert res.primal_residual < 1e-6

    def test_psd_consensus_blocks_after_solve(self):
        obs = [make_observation(8, noise=0.05) for _ in range(2)]
        targets, kinds, weights = [], [], []
        for o in obs:
            t, k = preprocess_observation(o)
            targets.append(t)
            kinds.append(k)
            weights.append(o.energy)
        res = admm_solve(
            targets, weights, kinds, AdmmOptions(max_iter=300, trace_every=1)
        )
        # the projected consensus variable stays PSD at every iteration
        scale = max(abs(row[4]) for row in res.trace) + 1.0
        assert all(row[4] >= -1e-8 * scale for row in res.trace)

    def test_ill_conditioned_pseudo_inverse_guard(self):
        obs = make_observation(8)
        sick = CascadeObservation(
            obs.pair,
            obs.matrix,
            obs.effective_signal * np.concatenate([np.ones(1), np.full(23, 1e-9)])[None, :],
            RankClass.FULL,
            obs.energy,
        )
        with pytest.raises(IllConditionedError):
            preprocess_observation(sick)


class TestAngleFromToeplitz:
    def test_exact_atom(self):
        # T(conj(a)) equals a a^H exactly for a unit-modulus steering atom
        a = steering_vector(0.3, 8)
        v = a.conj().copy()
        v[0] = v[0].real
        theta, low = angle_from_toeplitz(v, 8)
        assert abs(theta - 0.3) < 1e-6
        assert not low

    def test_scaling_invariance(self):
        a = steering_vector(-0.7, 6)
        v = a.conj().copy()
        v[0] = v[0].real
        t1, _ = angle_from_toeplitz(v, 6)
        t2, _ = angle_from_toeplitz(5.0 * v, 6)
        assert t1 == t2

    def test_two_source_flag(self):
        # atoms exactly orthogonal on an 8-element ULA: sin spacing 4/8
        th1, th2 = 0.0, float(np.arcsin(0.5))
        a1 = steering_vector(th1, 8)
        a2 = steering_vector(th2, 8)
        v = a1.conj() + 0.998 * a2.conj()
        v[0] = v[0].real
        theta, low = angle_from_toeplitz(v, 8)
        assert low  # nearly equal sources: no confident single read
        assert min(abs(theta - th1), abs(theta - th2)) < 0.05
        # clearly dominant second source: confident read of it
        v2 = a1.conj() + 3.0 * a2.conj()
        v2[0] = v2[0].real
        theta2, low2 = angle_from_toeplitz(v2, 8)
        assert not low2
        assert abs(theta2 - th2) < 0.01

    def test_degenerate_zero_matrix(self):
        with pytest.raises(DegenerateToeplitzError):
            angle_from_toeplitz(np.zeros(6), 6)


class TestAdmmAgainstInteriorPoint:
    def test_small_instances_match_sdp_oracle(self):
        cvxpy = pytest.importorskip("cvxpy")
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(4):
            m = n = 4
            n_obs = 1 + trial % 2
            targets, weights = [], []
            for _ in range(n_obs):
                th1, th2 = rng.uniform(-1.2, 1.2, 2)
                t = rng.uniform(0.5, 2.0) * np.outer(
                    steering_vector(th1, m), steering_vector(th2, n).conj()
                )
                t = t + 0.05 * (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n)))
                targets.append(t)
                weights.append(rng.uniform(0.5, 2.0))
            lam = 10.0
            res = admm_solve(
                targets,
                weights,
                [BlockKind.TOEPLITZ] * n_obs,
                AdmmOptions(max_iter=20000, eps_x=1e-14, eps_z=1e-14, lambda_fit=lam),
            )
            ref = _sdp_oracle(cvxpy, targets, weights, lam)
            rel = abs(res.objective - ref) / abs(ref)
            worst = max(worst, rel)
        assert worst < 1e-3, f"worst relative objective error {worst:.2e}"


def _sdp_oracle(cp, targets, weights, lam):
    """Interior-point solution of the identical Toeplitz-embedded SDP."""
    m, n = targets[0].shape
    tv = cp.Variable((m, m), hermitian=True)
    cons = []
    for off in range(m):
        for i in range(m - off - 1):
            cons.append(tv[i, i + off] == tv[i + 1, i + 1 + off])
    objective = 0
    for k, target in enumerate(targets):
        tu = cp.Variable((n, n), hermitian=True)
        for off in range(n):
            for i in range(n - off - 1):
                cons.append(tu[i, i + off] == tu[i + 1, i + 1 + off])
        x = cp.Variable((m, n), complex=True)
        cons.append(cp.bmat([[tv, x], [cp.conj(x.T), tu]]) >> 0)
        objective += weights[k] * (
            cp.real(cp.trace(tu)) + cp.real(cp.trace(tv)) + lam * cp.sum_squares(x - target)
        )
    problem = cp.Problem(cp.Minimize(objective), cons)
    problem.solve(solver=cp.CLARABEL)
    return problem.value
