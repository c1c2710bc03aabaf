"""Constants, the invertibility condition, and the error-bound ladder."""

import dataclasses

import numpy as np
import pytest

from hoij import (
    Dataset,
    DomainSampler,
    bounds_report,
    check_condition,
    derivative_norm_bounds,
    estimate_constants,
    evaluate_theta_ij,
    factorize_hessian,
    hessian_inverse_norm_check,
    loo_delta,
    loo_weights,
    make_problem,
    run_cv,
    solve_base,
    taylor_error_bound,
    term_tables,
    theta_difference_bound,
)
from hoij.bounds import (
    ConditionNotSatisfiedError,
    operator_norm_of_inverse,
    perturbed_inverse_bound,
)

from helpers import mean_dataset_1236


@pytest.fixture(scope="module")
def mean_constants():
    prob = make_problem("mean", mean_dataset_1236())
    theta_hat = solve_base(prob)
    sampler = DomainSampler(theta_hat, 0.0)
    constants = estimate_constants(prob, theta_hat, sampler, order=2, rho=0.5)
    return prob, theta_hat, constants


class TestEstimateConstants:
    def test_mean_model_values(self, mean_constants):
        _, _, c = mean_constants
        assert c.c_op == pytest.approx(1.0, rel=1e-12)
        assert c.m[1] == pytest.approx(1.0, rel=1e-12)
        assert c.m[2] == pytest.approx(0.0, abs=1e-15)
        assert c.m[3] == pytest.approx(0.0, abs=1e-15)
        assert c.l_h == pytest.approx(0.0, abs=1e-15)
        # residuals (2, 1, 0, -3): V_0 = 14/4, T_0 = 3
        assert c.v[0] == pytest.approx(3.5, rel=1e-12)
        assert c.t[0] == pytest.approx(3.0, rel=1e-12)

    def test_exp_loss_sup_on_interval(self):
        # single datum x=1: the first-derivative norm sup over [-r, r] is exp(r)
        prob = make_problem("exp_loss", Dataset(np.array([[1.0]])))
        sampler = DomainSampler(np.zeros(1), 0.1, n_samples=4096, seed=0)
        c = estimate_constants(prob, np.zeros(1), sampler, order=1)
        assert c.m[1] <= np.exp(0.1) + 1e-12
        assert c.m[1] >= np.exp(0.1) * 0.98

    def test_rho_validated(self, mean_constants):
        prob, theta_hat, _ = mean_constants
        with pytest.raises(ValueError, match="rho"):
            estimate_constants(prob, theta_hat, DomainSampler(theta_hat, 0.0), 1, rho=1.0)


class TestLooDelta:
    def test_mean_model_series(self, mean_constants):
        prob, theta_hat, _ = mean_constants
        deltas = loo_delta(prob, DomainSampler(theta_hat, 0.0), order=2)
        assert deltas.exact[0] == pytest.approx(0.75, rel=1e-12)
        assert deltas.exact[1] == pytest.approx(0.25, rel=1e-12)
        assert deltas.exact[2] == pytest.approx(0.0, abs=1e-15)
        assert deltas.exact[3] == pytest.approx(0.0, abs=1e-15)
        assert deltas.sqrt_v[0] == pytest.approx(np.sqrt(3.5 / 4.0), rel=1e-12)
        assert deltas.t_over_n[0] == pytest.approx(0.75, rel=1e-12)

    def test_exact_never_exceeds_sqrt_v(self):
        rng = np.random.default_rng(44)
        from helpers import ALL_MODELS, build_problem
        for model_id in ALL_MODELS:
            prob = build_problem(model_id, rng)
            theta = np.zeros(prob.dim_theta)
            deltas = loo_delta(prob, DomainSampler(theta, 0.2, n_samples=16, seed=1), 1)
            for k in deltas.exact:
                assert deltas.exact[k] <= deltas.sqrt_v[k] + 1e-12

    def test_epsilon_correction(self, mean_constants):
        prob, theta_hat, _ = mean_constants
        base = loo_delta(prob, DomainSampler(theta_hat, 0.0), 1)
        eps = loo_delta(prob, DomainSampler(theta_hat, 0.0), 1, epsilon=0.1)
        # M_1 = 1, so the order-1 level gains exactly 0.1
        assert eps.exact[1] == pytest.approx(base.exact[1] + 0.1, rel=1e-12)


class TestCheckCondition:
    def test_mean_satisfied(self, mean_constants):
        _, _, c = mean_constants
        check = check_condition(c, 0.5)
        assert check.c_set == pytest.approx(0.25, rel=1e-12)
        assert check.satisfied
        assert check.c_tilde_op == pytest.approx(2.0, rel=1e-12)

    def test_violated(self, mean_constants):
        _, _, c = mean_constants
        bad = dataclasses.replace(c, delta={**c.delta, 1: 1.0})
        check = check_condition(bad, 0.5)
        assert check.c_set == pytest.approx(1.0)
        assert not check.satisfied

    def test_rho_must_be_open_interval(self, mean_constants):
        _, _, c = mean_constants
        with pytest.raises(ValueError):
            check_condition(c, 1.0)
        with pytest.raises(ValueError):
            check_condition(c, 0.0)


class TestNormBounds:
    def test_mean_model_ladder(self, mean_constants):
        _, _, c = mean_constants
        nb = derivative_norm_bounds(c, 1)
        assert nb[1] == pytest.approx(1.5, rel=1e-12)
        assert nb[2] == pytest.approx(1.5, rel=1e-12)

    def test_actual_derivatives_within_bounds(self, mean_constants):
        prob, theta_hat, c = mean_constants
        nb = derivative_norm_bounds(c, 2)
        hfac = factorize_hessian(prob, theta_hat)
        table = term_tables(3)
        for w in loo_weights(4):
            expn = evaluate_theta_ij(prob, theta_hat, hfac, table, w.delta, 3)
            assert abs(expn.dthetas[0][0]) <= nb[1]
            assert abs(expn.dthetas[1][0]) <= nb[2]

    def test_zero_delta_gives_zero_bounds(self, mean_constants):
        _, _, c = mean_constants
        zeroed = dataclasses.replace(
            c, delta={k: 0.0 for k in c.delta}, c_set=0.0, delta_max=0.0
        )
        nb = derivative_norm_bounds(zeroed, 2)
        assert all(b == 0.0 for b in nb.values())

    def test_condition_failure_refuses(self, mean_constants):
        _, _, c = mean_constants
        bad = dataclasses.replace(c, delta={**c.delta, 1: 1.0},
                                  c_set=1.0)
        with pytest.raises(ConditionNotSatisfiedError, match="C_set"):
            derivative_norm_bounds(bad, 1)

    def test_monotone_in_constants(self, mean_constants):
        """Inflating any level constant never shrinks any bound."""
        _, _, c = mean_constants
        base = derivative_norm_bounds(c, 2)
        for key in (0, 1, 2):
            worse = dataclasses.replace(c, delta={**c.delta, key: c.delta[key] + 0.05})
            if check_condition(worse, worse.rho).satisfied:
                nb = derivative_norm_bounds(worse, 2)
                assert all(nb[k] >= base[k] - 1e-12 for k in nb)
        worse_m = dataclasses.replace(c, m={**c.m, 2: c.m[2] + 0.5})
        nb = derivative_norm_bounds(worse_m, 2)
        assert all(nb[k] >= base[k] - 1e-12 for k in nb)


class TestTaylorErrorBound:
    def test_mean_model_bounds(self, mean_constants):
        _, _, c = mean_constants
        nb = derivative_norm_bounds(c, 1)
        assert taylor_error_bound(0, nb) == pytest.approx(1.5, rel=1e-12)
        assert taylor_error_bound(1, nb) == pytest.approx(1.5, rel=1e-12)
        assert theta_difference_bound(c) == pytest.approx(0.75, rel=1e-12)

    def test_soundness_on_loo(self):
        """Actual LOO errors never exceed the mechanical bounds (K = 0, 1, 2)."""
        rng = np.random.default_rng(77)
        # near-orthogonal bounded design keeps the condition satisfiable
        x = np.column_stack([np.ones(100), rng.uniform(0.0, 1.0, 100) - 0.5])
        y = x @ np.array([1.0, 0.5]) + 0.1 * rng.uniform(-1, 1, 100)
        for prob in (make_problem("mean", mean_dataset_1236()),
                     make_problem("linear_regression", Dataset(x, y))):
            theta_hat = solve_base(prob)
            # enlarge the region enough to cover every LOO solution
            sampler = DomainSampler(theta_hat, 0.0)
            pilot = estimate_constants(prob, theta_hat, sampler, 2)
            sampler = DomainSampler(theta_hat, 2.0 * pilot.c_op * pilot.delta[0],
                                    n_samples=128, seed=5)
            c = estimate_constants(prob, theta_hat, sampler, 2)
            check = check_condition(c, 0.5)
            assert check.satisfied
            nb = derivative_norm_bounds(c, 2)
            report = run_cv(prob, loo_weights(prob.n_terms), 2)
            for k in (0, 1, 2):
                assert report.max_error[k] <= taylor_error_bound(k, nb) + 1e-12

    def test_zero_instance(self, mean_constants):
        _, _, c = mean_constants
        zeroed = dataclasses.replace(c, delta={k: 0.0 for k in c.delta}, c_set=0.0)
        nb = derivative_norm_bounds(zeroed, 1)
        assert taylor_error_bound(1, nb) == 0.0


class TestSegmentCheck:
    def test_mean_loo_segments_pass(self, mean_constants):
        prob, theta_hat, c = mean_constants
        check = check_condition(c, 0.5)
        for w in loo_weights(4):
            report = hessian_inverse_norm_check(prob, theta_hat, w, check.c_tilde_op)
            assert report.passed
            # closed form: inverse norm is N / (N - t) <= 4/3
            assert max(p.inverse_norm for p in report.points) == pytest.approx(4.0 / 3.0)

    def test_base_point_bounded_by_c_op(self, mean_constants):
        prob, theta_hat, c = mean_constants
        report = hessian_inverse_norm_check(prob, theta_hat, np.ones(4), c.c_op)
        assert report.passed

    def test_adversarial_constant_fails_at_base(self, mean_constants):
        prob, theta_hat, c = mean_constants
        report = hessian_inverse_norm_check(prob, theta_hat,
                                            next(iter(loo_weights(4, [4]))),
                                            0.5 * c.c_op)
        assert not report.passed
        assert not report.points[0].ok


class TestMatrixLemmas:
    def test_power_iteration_matches_svd(self):
        rng = np.random.default_rng(55)
        a = rng.standard_normal((250, 250))
        a = a @ a.T + 5.0 * np.eye(250)
        direct = operator_norm_of_inverse(a, max_dim_direct=1000)
        iterated = operator_norm_of_inverse(a, max_dim_direct=200)
        assert iterated == pytest.approx(direct, rel=1e-6)

    def test_integral_averaged_matrix_stays_invertible(self):
        """If ||A(t)^{-1}||_op <= C pointwise, the segment average obeys it too.

        Holds for families that are symmetric positive definite pointwise
        (eigenvalue bounds average); checked by quadrature on random PD
        pencils A(t) = A0 + t * A1.
        """
        rng = np.random.default_rng(56)
        for _ in range(25):
            dim = int(rng.integers(2, 6))
            a0 = rng.standard_normal((dim, dim))
            a0 = a0 @ a0.T + 0.5 * np.eye(dim)
            a1 = rng.standard_normal((dim, dim))
            a1 = a1 @ a1.T + 0.5 * np.eye(dim)
            grid = np.linspace(0.0, 1.0, 65)
            mats = [a0 + t * a1 for t in grid]
            c = max(operator_norm_of_inverse(m) for m in mats)
            avg = np.mean(mats, axis=0)   # trapezoid-free mean is fine: ends included
            assert operator_norm_of_inverse(avg) <= c * (1.0 + 1e-9)

    def test_solution_drift_within_c_op_delta0(self):
        """Every LOO re-solve stays within C_op * delta_0 of the base fit,
        once the sampling region covers the re-solved solutions."""
        prob = make_problem("mean", mean_dataset_1236())
        theta_hat = solve_base(prob)
        sampler = DomainSampler(theta_hat, 1.2, n_samples=512, seed=3)
        constants = estimate_constants(prob, theta_hat, sampler, 1)
        bound = theta_difference_bound(constants)
        for w in loo_weights(4):
            from hoij import exact_refit
            drift = np.linalg.norm(exact_refit(prob, w, theta_hat) - theta_hat)
            assert drift <= bound + 1e-12

    def test_perturbed_inverse_bound_randomized(self):
        """||A - D||_2 <= r / C_op implies ||D^{-1}||_op <= C_op / (1 - r)."""
        rng = np.random.default_rng(101)
        for _ in range(100):
            dim = int(rng.integers(2, 6))
            a = rng.standard_normal((dim, dim))
            a = a @ a.T + 0.5 * np.eye(dim)
            c_op = operator_norm_of_inverse(a)
            r = float(rng.uniform(0.05, 0.95))
            e = rng.standard_normal((dim, dim))
            e *= r / (c_op * np.linalg.norm(e))   # ||E||_2 = r / C_op exactly
            d = a + e
            assert operator_norm_of_inverse(d) <= perturbed_inverse_bound(c_op, r) + 1e-9

    def test_perturbation_ratio_domain(self):
        with pytest.raises(ValueError):
            perturbed_inverse_bound(1.0, 1.0)
        with pytest.raises(ValueError):
            perturbed_inverse_bound(1.0, 0.0)


class TestBoundsReport:
    def test_report_shape(self, mean_constants):
        prob, theta_hat, _ = mean_constants
        report = bounds_report(prob, theta_hat, DomainSampler(theta_hat, 0.0),
                               order=1, rho=0.5)
        assert report["condition_satisfied"]
        assert report["C_set"] == pytest.approx(0.25)
        assert report["C_tilde_op"] == pytest.approx(2.0)
        assert set(report["per_k"]) == {"0", "1", "2"}
        for k, rec in report["per_k"].items():
            expected = {"M", "delta_exact", "delta_v", "delta_t"}
            if k != "0":
                expected.add("B")
            assert expected <= set(rec)
        assert report["err_bound_per_K"]["0"] == pytest.approx(1.5)
        assert report["err_bound_per_K"]["1"] == pytest.approx(1.5)
        assert report["sup_estimate"] == "sampled sup"
