"""Constrained-Lasso machinery: tolerances, prox operators, solvers."""

import numpy as np
import pytest

from ctfsep.classo import (
    ClassoConfig,
    ToleranceModel,
    _BinOperator,
    _batch_project,
    compute_tolerance,
    power_iteration,
    project_ball,
    project_constraint,
    shrinkage,
    solve_classo,
    solve_lasso_fista,
)
from ctfsep.ctf import CtfTensor, ctf_convolve
from ctfsep.signals import Spectrogram

from scipy.fft import next_fast_len


def spec_of(coeffs):
    frame_len = 2 * (coeffs.shape[1] - 1)
    return Spectrogram(coeffs, frame_len, 1, 8000, 64)


class TestComputeTolerance:
    def test_noise_term_formula(self):
        # I=2, P=100, sigma^2=1: 200 - 2 sqrt(200)
        coeffs = np.zeros((2, 2, 100), complex)
        mics = spec_of(coeffs)
        tol = compute_tolerance(np.ones((2, 2)), mics)
        assert tol.eps_noise[0] == pytest.approx(200.0 - 2.0 * np.sqrt(200.0))
        assert tol.eps_noise[0] == pytest.approx(171.7157287525381)

    def test_spectral_subtraction_term(self):
        coeffs = np.zeros((2, 2, 100), complex)
        coeffs[0, 0, :] = np.sqrt(5.0)  # ||x||^2 = 500 at bin 0
        mics = spec_of(coeffs)
        tol = compute_tolerance(np.ones((2, 2)), mics)
        assert tol.gamma_signal[0] == pytest.approx(300.0)
        assert tol.eps_signal[0] == pytest.approx(3.0)
        assert tol.eps[0] == pytest.approx(171.7157287525381 + 3.0)

    def test_noise_free_limit(self):
        rng = np.random.default_rng(0)
        coeffs = rng.standard_normal((2, 3, 50)) + 1j * rng.standard_normal((2, 3, 50))
        mics = spec_of(coeffs)
        tol = compute_tolerance(np.zeros((3, 2)), mics)
        x_energy = np.sum(np.abs(coeffs) ** 2, axis=(0, 2))
        assert np.allclose(tol.eps_noise, 0.0)
        assert np.allclose(tol.eps, 0.01 * x_energy)

    def test_negative_clamp(self):
        # one frame: mean = sum sigma^2, std = sqrt(sum sigma^4) per mic;
        # with P=1 and one mic the difference is negative and clamps to 0
        coeffs = np.zeros((1, 2, 1), complex)
        tol = compute_tolerance(np.full((2, 1), 4.0), spec_of(coeffs))
        assert np.all(tol.eps_noise == 0.0)

    def test_shape_validation(self):
        coeffs = np.zeros((2, 3, 10), complex)
        with pytest.raises(ValueError):
            compute_tolerance(np.ones((2, 2)), spec_of(coeffs))
        with pytest.raises(ValueError):
            compute_tolerance(-np.ones((3, 2)), spec_of(coeffs))


class TestShrinkage:
    def test_complex_example(self):
        out = shrinkage(np.array([3.0 + 4.0j]), 1.0)
        assert np.allclose(out, [2.4 + 3.2j])

    def test_kills_small_entries(self):
        z = np.array([0.5, -0.3j, 0.1 + 0.1j])
        assert np.all(shrinkage(z, 1.0) == 0)

    def test_zero_threshold_is_identity(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal(20) + 1j * rng.standard_normal(20)
        assert np.allclose(shrinkage(z, 0.0), z)

    def test_zero_entry_stays_zero(self):
        assert shrinkage(np.array([0.0 + 0.0j]), 0.5)[0] == 0

    def test_non_expansive(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a = rng.standard_normal(30) + 1j * rng.standard_normal(30)
            b = rng.standard_normal(30) + 1j * rng.standard_normal(30)
            g = float(rng.uniform(0, 2))
            assert np.linalg.norm(shrinkage(a, g) - shrinkage(b, g)) <= np.linalg.norm(a - b) + 1e-12


class TestProjectBall:
    def test_feasible_unchanged(self):
        u = np.array([0.1, 0.2j])
        out = project_ball(u, 1.0)
        assert out is u

    def test_real_example(self):
        assert np.allclose(project_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    def test_complex_example(self):
        assert np.allclose(project_ball(np.array([5.0j]), 4.0), [2.0j])

    def test_always_feasible(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            u = rng.standard_normal((4, 7)) + 1j * rng.standard_normal((4, 7))
            eps = float(rng.uniform(0, 10))
            out = project_ball(u, eps)
            assert np.sum(np.abs(out) ** 2) <= eps + 1e-12


def random_operator(rng, n_mics=2, n_sources=2, n_taps=3, n_frames=6):
    a = rng.standard_normal((n_mics, n_sources, n_taps)) + 1j * rng.standard_normal(
        (n_mics, n_sources, n_taps)
    )
    return a, _BinOperator(a, n_frames)


def dense_matrix(op):
    n_in = op.n_sources * op.n_frames
    cols = []
    for j in range(op.n_sources):
        for t in range(op.n_frames):
            e = np.zeros((op.n_sources, op.n_frames), complex)
            e[j, t] = 1.0
            cols.append(op.forward(e).ravel())
    return np.array(cols).T


class TestPowerIteration:
    def test_identity_operator(self):
        a = np.ones((1, 1, 1), complex)
        op = _BinOperator(a, 5)
        assert power_iteration(op.forward, op.adjoint, (1, 5)) == pytest.approx(1.0)

    def test_scaling_operator(self):
        a = np.full((1, 1, 1), 2.0, complex)
        op = _BinOperator(a, 5)
        assert power_iteration(op.forward, op.adjoint, (1, 5)) == pytest.approx(4.0)

    def test_against_dense_eigenvalues(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            a, op = random_operator(rng)
            m = dense_matrix(op)
            top = np.linalg.eigvalsh(m.conj().T @ m).max()
            nu = power_iteration(op.forward, op.adjoint, (2, 6), seed=trial)
            assert nu == pytest.approx(top, rel=1e-3)

    def test_zero_operator(self):
        a = np.zeros((1, 1, 2), complex)
        op = _BinOperator(a, 4)
        assert power_iteration(op.forward, op.adjoint, (1, 4)) == 0.0

    def test_frame_bound_property(self):
        rng = np.random.default_rng(5)
        a, op = random_operator(rng)
        nu = power_iteration(op.forward, op.adjoint, (2, 6), seed=9)
        for _ in range(100):
            v = rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6))
            lhs = np.sum(np.abs(op.forward(v)) ** 2)
            assert lhs <= nu * np.sum(np.abs(v) ** 2) * (1 + 1e-6)


def projection_oracle(op, s, x, eps, tol=1e-12):
    """Exact projection onto {p : ||Ap - x||^2 <= eps} via the dense
    regularized path: p(lam) = (I + lam A^H A)^{-1} (s + lam A^H x)."""
    m = dense_matrix(op)
    s_vec = s.ravel()
    x_vec = x.ravel()
    if np.sum(np.abs(m @ s_vec - x_vec) ** 2) <= eps:
        return s
    gram = m.conj().T @ m
    rhs0 = m.conj().T @ x_vec
    eye = np.eye(gram.shape[0])

    def solve_lam(lam):
        p = np.linalg.solve(eye + lam * gram, s_vec + lam * rhs0)
        return p, np.sum(np.abs(m @ p - x_vec) ** 2)

    lo, hi = 0.0, 1.0
    while solve_lam(hi)[1] > eps:
        hi *= 2.0
        if hi > 1e18:
            raise RuntimeError("oracle failed to bracket the constraint")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        _, val = solve_lam(mid)
        if val > eps:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(hi, 1.0):
            break
    return solve_lam(hi)[0].reshape(s.shape)


class TestProjectConstraint:
    def test_feasible_point_returned_unchanged(self):
        rng = np.random.default_rng(6)
        a, op = random_operator(rng)
        s = rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6))
        x = op.forward(s) + 0.01 * rng.standard_normal((2, 6))
        eps = 2 * np.sum(np.abs(op.forward(s) - x) ** 2)
        result = project_constraint(s, a, x, eps)
        assert result.feasible
        assert result.iterations == 0
        assert np.array_equal(result.projected, s)

    def test_exact_data_returns_start(self):
        rng = np.random.default_rng(7)
        a, op = random_operator(rng)
        s = rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6))
        x = op.forward(s)
        result = project_constraint(s, a, x, 1e-3)
        assert result.feasible and result.iterations == 0
        assert np.array_equal(result.projected, s)

    def test_infeasible_start_reaches_constraint_near_oracle(self):
        rng = np.random.default_rng(8)
        a, op = random_operator(rng)
        s_true = rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6))
        x = op.forward(s_true)
        s0 = s_true + 3.0 * (rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6)))
        eps = 0.05 * np.sum(np.abs(x) ** 2)
        cfg = ClassoConfig(max_inner=2000)
        result = project_constraint(s0, a, x, eps, cfg)
        assert result.feasible
        res2 = np.sum(np.abs(op.forward(result.projected) - x) ** 2)
        assert res2 <= cfg.slack * eps
        q = projection_oracle(op, s0, x, eps)
        moved = np.linalg.norm(result.projected - s0)
        optimal = np.linalg.norm(q - s0)
        assert moved <= optimal * (1.0 + 0.2) + 1e-9

    def test_non_finite_rejected(self):
        a = np.ones((1, 1, 1), complex)
        with pytest.raises(ValueError):
            project_constraint(np.array([[np.nan + 0j]]), a, np.ones((1, 1), complex), 1.0)

    def test_batch_matches_single_bin(self):
        rng = np.random.default_rng(9)
        n_bins, n_frames = 4, 6
        ctf = rng.standard_normal((2, 2, n_bins, 3)) + 1j * rng.standard_normal((2, 2, n_bins, 3))
        s = rng.standard_normal((n_bins, 2, n_frames)) + 1j * rng.standard_normal(
            (n_bins, 2, n_frames)
        )
        x = rng.standard_normal((n_bins, 2, n_frames)) + 1j * rng.standard_normal(
            (n_bins, 2, n_frames)
        )
        eps = rng.uniform(0.05, 0.3, n_bins) * np.sum(np.abs(x) ** 2, axis=(1, 2))
        cfg = ClassoConfig(max_inner=50)
        fft_len = next_fast_len(n_frames + 2)
        ctf_f = np.fft.fft(ctf.transpose(2, 0, 1, 3), fft_len, axis=-1)
        nus, mus = [], []
        for k in range(n_bins):
            op = _BinOperator(ctf[:, :, k], n_frames)
            nu = power_iteration(op.forward, op.adjoint, (2, n_frames), seed=k)
            nus.append(nu)
            mus.append(1.0 / nu)
        batch_p, batch_feasible = _batch_project(
            ctf_f, s.copy(), x, eps, np.array(mus), cfg
        )
        for k in range(n_bins):
            single = project_constraint(s[k], ctf[:, :, k], x[k], eps[k], cfg, nu=nus[k])
            assert np.allclose(batch_p[k], single.projected, atol=1e-10)
            assert batch_feasible[k] == single.feasible


def exact_tolerance(x_spec, scale):
    x_energy = np.sum(np.abs(x_spec.coeffs) ** 2, axis=(0, 2))
    n_bins = x_spec.n_bins
    return ToleranceModel(
        sigma2=np.zeros((n_bins, x_spec.n_channels)),
        n_frames=x_spec.n_frames,
        eps_noise=np.zeros(n_bins),
        gamma_signal=x_energy,
        eps_signal=scale * x_energy,
        eps=scale * x_energy,
    )


class TestSolveClasso:
    def test_zero_mixture_gives_zero(self):
        rng = np.random.default_rng(10)
        ctf = CtfTensor(
            rng.standard_normal((2, 2, 3, 2)) + 1j * rng.standard_normal((2, 2, 3, 2)), 4, 1
        )
        mics = spec_of(np.zeros((2, 3, 8), complex))
        tol = exact_tolerance(mics, 1e-6)
        result = solve_classo(ctf, mics, tol)
        assert np.all(result.sources.coeffs == 0)
        assert np.all(result.feasible)

    def test_small_energy_bins_are_zeroed(self):
        rng = np.random.default_rng(11)
        ctf = CtfTensor(
            rng.standard_normal((2, 2, 3, 2)) + 1j * rng.standard_normal((2, 2, 3, 2)), 4, 1
        )
        coeffs = np.zeros((2, 3, 8), complex)
        coeffs[:, 1, :] = rng.standard_normal((2, 8))  # only bin 1 carries energy
        mics = spec_of(coeffs)
        x_energy = np.sum(np.abs(coeffs) ** 2, axis=(0, 2))
        tol = ToleranceModel(
            sigma2=np.zeros((3, 2)), n_frames=8, eps_noise=np.zeros(3),
            gamma_signal=x_energy, eps_signal=np.maximum(0.05 * x_energy, 1e-9),
            eps=np.maximum(0.05 * x_energy, 1e-9),
        )
        result = solve_classo(ctf, mics, tol)
        assert np.all(result.sources.coeffs[:, 0, :] == 0)
        assert np.all(result.sources.coeffs[:, 2, :] == 0)
        assert np.all(result.feasible)

    def test_feasibility_contract(self):
        # every bin satisfies the slackened constraint or is flagged
        rng = np.random.default_rng(12)
        n_bins, n_frames = 5, 10
        ctf = CtfTensor(
            rng.standard_normal((3, 2, n_bins, 3)) + 1j * rng.standard_normal((3, 2, n_bins, 3)),
            (n_bins - 1) * 2, 1,
        )
        src = spec_of(rng.standard_normal((2, n_bins, n_frames))
                      + 1j * rng.standard_normal((2, n_bins, n_frames)))
        mixed = ctf_convolve(ctf, src)
        mics = mixed.with_coeffs(mixed.coeffs[:, :, :n_frames])
        tol = exact_tolerance(mics, 0.02)
        cfg = ClassoConfig(max_inner=150)
        result = solve_classo(ctf, mics, tol, cfg)
        x = mics.coeffs.transpose(1, 0, 2)
        for k in range(n_bins):
            op = _BinOperator(ctf.coeffs[:, :, k], mics.n_frames)
            res2 = np.sum(np.abs(op.forward(result.sources.coeffs[:, k]) - x[k]) ** 2)
            if result.feasible[k]:
                assert res2 <= cfg.slack * tol.eps[k] * (1 + 1e-9)

    def test_recovers_sources_on_model_exact_mixture(self):
        rng = np.random.default_rng(13)
        n_bins, n_frames = 4, 20
        n_taps = 3
        ctf = CtfTensor(
            rng.standard_normal((4, 2, n_bins, n_taps))
            + 1j * rng.standard_normal((4, 2, n_bins, n_taps)),
            (n_bins - 1) * 2, 1,
        )
        src = rng.standard_normal((2, n_bins, n_frames)) + 1j * rng.standard_normal(
            (2, n_bins, n_frames)
        )
        # sparsify: keep strong entries only
        src[np.abs(src) < 1.0] = 0.0
        full = ctf_convolve(ctf, spec_of(src))
        tol = exact_tolerance(full, 1e-6)
        result = solve_classo(ctf, full, tol, ClassoConfig(max_inner=600))
        est = result.sources.coeffs[:, :, :n_frames]
        err = np.linalg.norm(est - src) / np.linalg.norm(src)
        assert err < 0.1

    def test_monotone_l1_in_eps(self):
        rng = np.random.default_rng(14)
        n_bins, n_frames = 3, 12
        ctf = CtfTensor(
            rng.standard_normal((3, 2, n_bins, 2)) + 1j * rng.standard_normal((3, 2, n_bins, 2)),
            (n_bins - 1) * 2, 1,
        )
        src = rng.standard_normal((2, n_bins, n_frames)) + 1j * rng.standard_normal(
            (2, n_bins, n_frames)
        )
        mixed = ctf_convolve(ctf, spec_of(src))
        mics = mixed.with_coeffs(mixed.coeffs[:, :, :n_frames])
        base = 0.01 * np.sum(np.abs(mics.coeffs) ** 2, axis=(0, 2))
        l1 = []
        for factor in (1.0, 2.0, 4.0):
            x_energy = np.sum(np.abs(mics.coeffs) ** 2, axis=(0, 2))
            tol = ToleranceModel(
                sigma2=np.zeros((n_bins, 3)), n_frames=n_frames, eps_noise=np.zeros(n_bins),
                gamma_signal=x_energy, eps_signal=factor * base, eps=factor * base,
            )
            result = solve_classo(ctf, mics, tol, ClassoConfig(max_inner=400))
            l1.append(np.sum(np.abs(result.sources.coeffs)))
        assert l1[0] >= l1[1] - 1e-6
        assert l1[1] >= l1[2] - 1e-6


class TestSolveLassoFista:
    def test_identity_zero_penalty_returns_input(self):
        rng = np.random.default_rng(15)
        ctf = CtfTensor(np.ones((1, 1, 3, 1), complex), 4, 1)
        x = rng.standard_normal((1, 3, 10)) + 1j * rng.standard_normal((1, 3, 10))
        mics = spec_of(x)
        out = solve_lasso_fista(ctf, mics, 0.0)
        assert np.allclose(out.coeffs, x, atol=1e-8)

    def test_large_penalty_kills_solution(self):
        rng = np.random.default_rng(16)
        n_bins = 3
        ctf = CtfTensor(
            rng.standard_normal((2, 2, n_bins, 2)) + 1j * rng.standard_normal((2, 2, n_bins, 2)),
            4, 1,
        )
        x = rng.standard_normal((2, n_bins, 8)) + 1j * rng.standard_normal((2, n_bins, 8))
        mics = spec_of(x)
        # kill condition: lam >= 2 max |A* x| entrywise per bin
        lam = 0.0
        for k in range(n_bins):
            op = _BinOperator(ctf.coeffs[:, :, k], 8)
            lam = max(lam, 2.0 * np.max(np.abs(op.adjoint(x.transpose(1, 0, 2)[k]))))
        out = solve_lasso_fista(ctf, mics, lam * 1.01)
        assert np.all(out.coeffs == 0)

    def test_objective_comparable_to_classo(self):
        # cross-check only: both solvers produce finite objectives on the
        # same instance; no ordering is asserted
        rng = np.random.default_rng(17)
        n_bins, n_frames = 3, 10
        ctf = CtfTensor(
            rng.standard_normal((3, 2, n_bins, 2)) + 1j * rng.standard_normal((3, 2, n_bins, 2)),
            4, 1,
        )
        src = rng.standard_normal((2, n_bins, n_frames)) + 1j * rng.standard_normal(
            (2, n_bins, n_frames)
        )
        mixed = ctf_convolve(ctf, spec_of(src))
        mics = mixed.with_coeffs(mixed.coeffs[:, :, :n_frames])
        lam = 0.05
        fista = solve_lasso_fista(ctf, mics, lam)
        tol = exact_tolerance(mics, 0.01)
        classo = solve_classo(ctf, mics, tol, ClassoConfig(max_inner=200))

        def objective(s):
            total = 0.0
            x = mics.coeffs.transpose(1, 0, 2)
            for k in range(n_bins):
                op = _BinOperator(ctf.coeffs[:, :, k], n_frames)
                total += np.sum(np.abs(op.forward(s[:, k]) - x[k]) ** 2)
            return total + lam * np.sum(np.abs(s))

        assert np.isfinite(objective(fista.coeffs))
        assert np.isfinite(objective(classo.sources.coeffs))

    def test_negative_penalty_rejected(self):
        ctf = CtfTensor(np.ones((1, 1, 3, 1), complex), 4, 1)
        with pytest.raises(ValueError):
            solve_lasso_fista(ctf, spec_of(np.zeros((1, 3, 4), complex)), -1.0)


class TestClassoConfig:
    def test_validation(self):
        ClassoConfig()
        with pytest.raises(ValueError):
            ClassoConfig(alpha=2.0)
        with pytest.raises(ValueError):
            ClassoConfig(gamma=0.0)
        with pytest.raises(ValueError):
            ClassoConfig(mu_factor=2.5)
        with pytest.raises(ValueError):
            ClassoConfig(slack=0.9)
