"""Submodel likelihood, Fisher information, and the Newton MLE."""

import math

import numpy as np
import pytest
from scipy import stats

from asterenv.errors import BoundaryError, ConvergenceError, NumericalError, RankError
from asterenv.families import Family
from asterenv.graph import (
    GraphSpec,
    covariance_blocks,
    simulate,
    survival_fecundity_chain,
    survival_reproduction_graph,
    theta_to_phi,
)
from asterenv.model import (
    AsterModel,
    fisher_info,
    fit_mle,
    log_lik,
    mean_value,
    score,
    tau_to_beta,
)


def bernoulli_chain(depth):
    nodes = [f"b{i}" for i in range(depth)]
    pred = {n: (nodes[i - 1] if i else None) for i, n in enumerate(nodes)}
    return GraphSpec.build(nodes, pred, {n: Family.BERNOULLI for n in nodes}, [nodes[-1]])


def poisson_chain(depth):
    nodes = [f"p{i}" for i in range(depth)]
    pred = {n: (nodes[i - 1] if i else None) for i, n in enumerate(nodes)}
    return GraphSpec.build(nodes, pred, {n: Family.POISSON for n in nodes}, [nodes[-1]])


def saturated_model(ga, Y):
    """M = I per individual, a = 0: beta indexes phi directly."""
    n, J = Y.shape
    M = np.zeros((n, J, n * J))
    for i in range(n):
        for j in range(J):
            M[i, j, i * J + j] = 1.0
    return AsterModel.build(ga, Y, M, interest_dim=n * J)


def intercept_model(ga, Y, interest_dim=0):
    """One intercept column per node."""
    n, J = Y.shape
    M = np.zeros((n, J, J))
    for j in range(J):
        M[:, j, j] = 1.0
    return AsterModel.build(ga, Y, M, interest_dim=interest_dim)


def chain_covariate_model(n, rng, *, seed_theta=(0.9, 0.6), slope=(0.6, -0.4)):
    """Two-node chain with one covariate on the count node."""
    ga = survival_fecundity_chain().compile()
    z = rng.uniform(-1, 1, size=n)
    M = np.zeros((n, 2, 3))
    M[:, 0, 0] = 1.0
    M[:, 1, 1] = 1.0
    M[:, 1, 2] = z
    beta_true = np.array([seed_theta[0], seed_theta[1], slope[0]])
    phi = np.einsum("njp,p->nj", M, beta_true)
    from asterenv.graph import phi_to_theta

    theta = phi_to_theta(ga, phi)
    Y = simulate(ga, theta, rng)
    # guard against an all-zero leaf making the fit a boundary case
    assert Y[:, 1].sum() > 0
    return AsterModel.build(ga, Y, M, interest_dim=1), beta_true


class TestLogLik:
    def test_saturated_bernoulli_matches_density_sum(self):
        # Brute-force oracle: sum of exact conditional log pmfs.  The
        # Bernoulli family has unit base measure, so the values agree
        # absolutely, not just up to a constant.
        ga = bernoulli_chain(2).compile()
        Y = np.array([[1, 0], [1, 1], [0, 0]], dtype=float)
        model = saturated_model(ga, Y)
        rng = np.random.default_rng(31)
        for _ in range(5):
            phi = rng.uniform(-1.5, 1.5, size=(3, 2))
            from asterenv.graph import phi_to_theta

            theta = phi_to_theta(ga, phi)
            oracle = 0.0
            for i in range(3):
                p0 = 1 / (1 + math.exp(-theta[i, 0]))
                oracle += stats.bernoulli.logpmf(Y[i, 0], p0)
                if Y[i, 0] > 0:
                    p1 = 1 / (1 + math.exp(-theta[i, 1]))
                    oracle += stats.bernoulli.logpmf(Y[i, 1], p1)
            got = log_lik(model, phi.ravel())
            assert got == pytest.approx(oracle, abs=1e-10)

    def test_ztp_chain_matches_density_differences(self):
        # With count families the base measure (1/y!) drops out of
        # likelihood *differences*; compare those against scipy pmfs.
        ga = survival_fecundity_chain().compile()
        Y = np.array([[1, 2], [1, 5], [0, 0]], dtype=float)
        model = saturated_model(ga, Y)

        def oracle(phi):
            from asterenv.graph import phi_to_theta

            theta = phi_to_theta(ga, phi)
            tot = 0.0
            for i in range(3):
                p = 1 / (1 + math.exp(-theta[i, 0]))
                tot += stats.bernoulli.logpmf(Y[i, 0], p)
                if Y[i, 0] > 0:
                    lam = math.exp(theta[i, 1])
                    tot += (
                        stats.poisson.logpmf(Y[i, 1], lam)
                        - math.log1p(-math.exp(-lam))
                    )
            return tot

        rng = np.random.default_rng(32)
        phi1 = rng.uniform(-1, 1, size=(3, 2))
        phi2 = rng.uniform(-1, 1, size=(3, 2))
        diff_model = log_lik(model, phi1.ravel()) - log_lik(model, phi2.ravel())
        diff_oracle = oracle(phi1) - oracle(phi2)
        assert diff_model == pytest.approx(diff_oracle, abs=1e-10)

    def test_zero_beta_zero_offset_is_minus_cjoint(self):
        ga = survival_reproduction_graph(2).compile()
        n = 4
        Y = simulate(ga, np.zeros((n, ga.n_nodes)), np.random.default_rng(33))
        model = intercept_model(ga, Y)
        from asterenv.graph import joint_cumulant

        expected = -joint_cumulant(ga, np.zeros((n, ga.n_nodes))).sum()
        assert log_lik(model, np.zeros(ga.n_nodes)) == pytest.approx(expected, rel=1e-12)

    def test_concavity_along_segments(self):
        rng = np.random.default_rng(34)
        model, _ = chain_covariate_model(60, rng)
        p = model.n_coef
        for _ in range(100):
            b1 = rng.uniform(-1, 1, size=p)
            b2 = rng.uniform(-1, 1, size=p)
            mid = log_lik(model, (b1 + b2) / 2)
            assert mid >= (log_lik(model, b1) + log_lik(model, b2)) / 2 - 1e-9


class TestScoreFisher:
    def test_score_is_fd_gradient(self):
        rng = np.random.default_rng(35)
        model, _ = chain_covariate_model(40, rng)
        beta = np.array([0.3, 0.4, -0.2])
        s = score(model, beta)
        h = 1e-6
        for j in range(3):
            up, dn = beta.copy(), beta.copy()
            up[j] += h
            dn[j] -= h
            fd = (log_lik(model, up) - log_lik(model, dn)) / (2 * h)
            assert s[j] == pytest.approx(fd, rel=1e-5, abs=1e-5)

    def test_fisher_is_fd_hessian(self):
        # 3-node graph, 5 individuals, analytic vs FD Hessian
        ga = survival_reproduction_graph(1).compile()
        rng = np.random.default_rng(36)
        Y = simulate(ga, np.full((5, 3), 0.4), rng)
        Y[:, 0] = 1  # keep off the boundary
        Y[:, 1] = np.maximum(Y[:, 1], 1)
        Y[:, 2] = np.maximum(Y[:, 2], Y[:, 1])
        model = intercept_model(ga, Y)
        beta = np.array([0.5, -0.2, 0.3])
        F = fisher_info(model, beta)
        h = 1e-5
        p = 3
        H = np.zeros((p, p))
        for a in range(p):
            for b in range(p):
                bpp, bpm, bmp, bmm = (beta.copy() for _ in range(4))
                bpp[a] += h
                bpp[b] += h
                bpm[a] += h
                bpm[b] -= h
                bmp[a] -= h
                bmp[b] += h
                bmm[a] -= h
                bmm[b] -= h
                H[a, b] = (
                    log_lik(model, bpp)
                    - log_lik(model, bpm)
                    - log_lik(model, bmp)
                    + log_lik(model, bmm)
                ) / (4 * h * h)
        assert np.linalg.norm(F + H) / np.linalg.norm(F) < 1e-4

    def test_fisher_matches_empirical_variance(self):
        # Var(M^T Y) over many simulations vs analytic M^T W M
        ga = survival_fecundity_chain().compile()
        rng = np.random.default_rng(37)
        n = 100_000
        z = np.tile(np.array([-0.5, 0.5]), n // 2)
        M = np.zeros((n, 2, 3))
        M[:, 0, 0] = 1.0
        M[:, 1, 1] = 1.0
        M[:, 1, 2] = z
        beta = np.array([0.8, 0.5, 0.4])
        phi = np.einsum("njp,p->nj", M, beta)
        from asterenv.graph import phi_to_theta

        theta = phi_to_theta(ga, phi)
        Y = simulate(ga, theta, rng)
        model = AsterModel.build(ga, Y, M, interest_dim=1, check_response=False)
        F = fisher_info(model, beta)
        W = covariance_blocks(ga, theta)
        # empirical covariance of per-individual contributions x_i = M_i^T Y_i
        X = np.einsum("njp,nj->np", M, Y.astype(float))
        emp = (X - X.mean(axis=0)).T @ (X - X.mean(axis=0))
        # centering removes the between-theta variation, which is not in F;
        # instead sum per-individual covariance: use uncentered residual form
        mu = mean_value(model, beta)
        R = np.einsum("njp,nj->np", M, Y - mu)
        emp = R.T @ R
        assert np.linalg.norm(emp - F) / np.linalg.norm(F) < 0.05

    def test_score_vanishes_at_mle(self):
        rng = np.random.default_rng(38)
        model, _ = chain_covariate_model(300, rng)
        fit = fit_mle(model)
        s = score(model, fit.beta_hat)
        assert np.abs(s).max() < 1e-8 * (1 + np.abs(model.tau_obs).max())

    def test_fisher_spd(self):
        rng = np.random.default_rng(39)
        model, _ = chain_covariate_model(100, rng)
        F = fisher_info(model, np.array([0.2, 0.1, 0.0]))
        np.testing.assert_allclose(F, F.T, atol=1e-12)
        assert np.linalg.eigvalsh(F).min() > 0


class TestFit:
    def test_saturated_poisson_observed_equals_expected(self):
        # Saturated model with interior counts: mu_hat = Y, tau_hat = Y
        ga = poisson_chain(2).compile()
        Y = np.array([[3, 5], [2, 1], [4, 7]], dtype=float)
        model = saturated_model(ga, Y)
        fit = fit_mle(model)
        np.testing.assert_array_equal(fit.tau_hat, Y.ravel())
        np.testing.assert_allclose(fit.mu_hat, Y, rtol=1e-8)

    def test_intercept_only_tau_is_node_sums(self):
        ga = survival_reproduction_graph(2).compile()
        rng = np.random.default_rng(40)
        Y = simulate(ga, np.full((200, 6), 0.5), rng)
        model = intercept_model(ga, Y)
        fit = fit_mle(model)
        np.testing.assert_allclose(fit.tau_hat, Y.sum(axis=0), rtol=1e-14)
        tau_fitted = np.einsum("njp,nj->p", model.M, fit.mu_hat)
        scale = 1 + np.abs(fit.tau_hat).max()
        assert np.abs(tau_fitted - fit.tau_hat).max() < 1e-6 * scale

    def test_recovers_truth_at_large_n(self):
        rng = np.random.default_rng(41)
        model, beta_true = chain_covariate_model(10_000, rng)
        fit = fit_mle(model)
        sd = np.sqrt(np.diag(np.linalg.inv(fit.Sigma_hat)))
        assert (np.abs(fit.beta_hat - beta_true) < 4 * sd).all()

    def test_loglik_increases_along_iterations(self):
        rng = np.random.default_rng(42)
        model, _ = chain_covariate_model(150, rng)
        lls = [log_lik(model, np.zeros(3))]
        fit = fit_mle(model)
        lls.append(fit.loglik)
        assert lls[1] > lls[0]

    def test_rank_deficient_matrix_rejected(self):
        ga = survival_fecundity_chain().compile()
        Y = np.array([[1, 2], [1, 3]], dtype=float)
        M = np.zeros((2, 2, 2))
        M[:, 0, 0] = 1.0
        M[:, 0, 1] = 2.0  # duplicate direction
        with pytest.raises(RankError):
            AsterModel.build(ga, Y, M)

    def test_separated_bernoulli_meets_contract(self):
        # All survival equal 1: the exact MLE sits at +infinity, but the
        # relative score tolerance is attainable at finite phi, so the fit
        # returns a saturated approximation that still satisfies
        # observed-equals-expected.
        ga = bernoulli_chain(1).compile()
        Y = np.ones((30, 1))
        model = intercept_model(ga, Y)
        fit = fit_mle(model, check_condition=False)
        scale = 1 + np.abs(model.tau_obs).max()
        tau_fitted = np.einsum("njp,nj->p", model.M, fit.mu_hat)
        assert np.abs(tau_fitted - model.tau_obs).max() < 1e-6 * scale
        assert fit.mu_hat.min() > 1 - 1e-6

    def test_fit_deterministic(self):
        rng = np.random.default_rng(43)
        model, _ = chain_covariate_model(100, rng)
        f1 = fit_mle(model)
        f2 = fit_mle(model)
        np.testing.assert_array_equal(f1.beta_hat, f2.beta_hat)


class TestTauToBeta:
    def test_round_trip_identity(self):
        rng = np.random.default_rng(44)
        model, _ = chain_covariate_model(200, rng)
        for _ in range(20):
            beta = rng.uniform(-1, 1, size=3)
            tau = np.einsum("njp,nj->p", model.M, mean_value(model, beta))
            back = tau_to_beta(model, tau, beta0=beta + rng.normal(0, 0.3, 3))
            np.testing.assert_allclose(back, beta, atol=1e-8)

    def test_observed_tau_gives_mle(self):
        rng = np.random.default_rng(45)
        model, _ = chain_covariate_model(150, rng)
        fit = fit_mle(model)
        beta = tau_to_beta(model, model.tau_obs)
        np.testing.assert_allclose(beta, fit.beta_hat, atol=1e-7)

    def test_boundary_target_fails(self):
        ga = survival_fecundity_chain().compile()
        rng = np.random.default_rng(46)
        Y = simulate(ga, np.full((50, 2), 0.6), rng)
        model = intercept_model(ga, Y)
        bad = model.tau_obs.copy()
        bad[1] = 0.0  # count-node total zero is outside the open mean-value set
        with pytest.raises((ConvergenceError, BoundaryError, NumericalError)):
            tau_to_beta(model, bad)


class TestResponseValidation:
    def test_child_nonzero_under_dead_parent(self):
        ga = survival_fecundity_chain().compile()
        Y = np.array([[0, 3]], dtype=float)
        M = np.zeros((1, 2, 2))
        M[:, 0, 0] = 1.0
        M[:, 1, 1] = 1.0
        with pytest.raises(ValueError, match="zero predecessor"):
            AsterModel.build(ga, Y, M)

    def test_negative_count(self):
        ga = survival_fecundity_chain().compile()
        Y = np.array([[1, -2]], dtype=float)
        M = np.zeros((1, 2, 2))
        M[:, 0, 0] = 1.0
        M[:, 1, 1] = 1.0
        with pytest.raises(ValueError, match="nonnegative"):
            AsterModel.build(ga, Y, M)
