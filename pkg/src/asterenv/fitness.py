"""Expected fitness for covariate profiles, landscape grids, delta SEs.

Expected fitness of a profile is the sum of mean-value components over
the graph's fitness nodes, evaluated at the coefficient vector that
realizes a given mean-value target: solve the target for beta, map the
profile rows through the linear predictor, run the mean recursion, sum.
For envelope (rank-deficient) structures every coefficient solution
yields the same fitness; the projection is applied explicitly so the
value is well defined for any representative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envelope import EnvelopeStructure, _interest_basis
from .graph import compute_mu, phi_to_theta
from .model import AsterModel, FitResult, _newton, reduced_for_sweep, tau_to_beta

__all__ = ["FitnessQuery", "expected_fitness", "landscape_grid", "delta_method_se"]


@dataclass(frozen=True)
class FitnessQuery:
    """Model-matrix rows for hypothetical individuals.

    ``profiles`` has one (n_nodes, p) block per profile, built with the
    same column layout as the fitted model; ``offset`` matches blockwise.
    """

    profiles: np.ndarray  # (q, J, p)
    offset: np.ndarray  # (q, J)
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.profiles.ndim != 3:
            raise ValueError("profiles must be (q, n_nodes, p)")
        if self.offset.shape != self.profiles.shape[:2]:
            raise ValueError("offset and profiles disagree on shape")

    @property
    def n_profiles(self) -> int:
        return self.profiles.shape[0]

    @staticmethod
    def from_rows(
        profiles: np.ndarray,
        offset: np.ndarray | float = 0.0,
        labels: tuple[str, ...] = (),
    ) -> "FitnessQuery":
        profiles = np.asarray(profiles, dtype=float)
        if np.isscalar(offset):
            offset = np.full(profiles.shape[:2], float(offset))
        return FitnessQuery(profiles=profiles, offset=np.asarray(offset, dtype=float),
                            labels=tuple(labels))


def resolve_beta(
    model: AsterModel,
    tau: np.ndarray,
    structure: EnvelopeStructure | None = None,
    beta0: np.ndarray | None = None,
) -> np.ndarray:
    """Coefficient vector realizing the mean-value target.

    Full-rank models invert tau directly.  With an envelope structure the
    system is solved in the reduced coordinates, giving the minimum-norm
    solution of the rank-deficient model.
    """
    tau = np.asarray(tau, dtype=float)
    if structure is None:
        return tau_to_beta(model, tau, beta0=beta0)
    B = _interest_basis(model.n_coef, structure.Gamma_hat)
    reduced = reduced_for_sweep(model, B)
    eta0 = None if beta0 is None else B.T @ beta0
    eta, _, _, _, _ = _newton(reduced, B.T @ tau, eta0)
    return B @ eta


def fitness_from_beta(
    model: AsterModel,
    beta: np.ndarray,
    query: FitnessQuery,
    structure: EnvelopeStructure | None = None,
) -> np.ndarray:
    """Sum of fitness-node means per profile at a coefficient vector."""
    beta = np.asarray(beta, dtype=float)
    if structure is not None:
        # project onto the envelope range so every solution representative
        # of the rank-deficient system gives the same value
        k = structure.P_hat.shape[0]
        beta = beta.copy()
        beta[-k:] = structure.P_hat @ beta[-k:]
    ga = model.graph
    phi = query.offset + np.einsum("qjp,p->qj", query.profiles, beta)
    mu = compute_mu(ga, phi_to_theta(ga, phi))
    return mu[:, ga.fitness_idx].sum(axis=1)


def expected_fitness(
    model: AsterModel,
    tau: np.ndarray,
    query: FitnessQuery,
    *,
    structure: EnvelopeStructure | None = None,
    beta: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
) -> np.ndarray:
    """Expected fitness per profile at a mean-value target.

    ``beta`` short-circuits the solve when the caller already has the
    coefficient solution (bootstrap replicates do).
    """
    if beta is None:
        beta = resolve_beta(model, tau, structure, beta0)
    return fitness_from_beta(model, beta, query, structure)


def landscape_grid(
    model: AsterModel,
    tau: np.ndarray,
    z1_values: np.ndarray,
    z2_values: np.ndarray,
    profile_builder,
    *,
    structure: EnvelopeStructure | None = None,
    beta0: np.ndarray | None = None,
) -> np.ndarray:
    """Fitness over the Cartesian grid of two covariates.

    ``profile_builder(z1, z2)`` returns the (n_nodes, p) rows for one
    hypothetical individual.  The target is inverted once; grid points
    reuse the solution.  Returns records ``(z1, z2, ghat)`` as an
    (len(z1) * len(z2), 3) array in row-major grid order.
    """
    beta = resolve_beta(model, tau, structure, beta0)
    rows = []
    for z1 in z1_values:
        for z2 in z2_values:
            rows.append(profile_builder(float(z1), float(z2)))
    query = FitnessQuery.from_rows(np.stack(rows))
    g = fitness_from_beta(model, beta, query, structure)
    z1g, z2g = np.meshgrid(z1_values, z2_values, indexing="ij")
    return np.column_stack([z1g.ravel(), z2g.ravel(), g])


def delta_method_se(
    model: AsterModel,
    fit: FitResult,
    query: FitnessQuery,
    *,
    rel_step: float = 1e-5,
) -> np.ndarray:
    """Asymptotic standard error of expected fitness per profile.

    The gradient of fitness with respect to the mean-value coordinates is
    taken by centered finite differences through the full
    target -> coefficients -> means -> fitness pipeline, then sandwiched
    with the Fisher information (the exact covariance of the observed
    statistic).
    """
    tau = fit.tau_hat
    p = len(tau)
    grads = np.empty((query.n_profiles, p))
    for j in range(p):
        h = rel_step * (1.0 + abs(tau[j]))
        up = tau.copy()
        dn = tau.copy()
        up[j] += h
        dn[j] -= h
        g_up = expected_fitness(model, up, query, beta0=fit.beta_hat)
        g_dn = expected_fitness(model, dn, query, beta0=fit.beta_hat)
        grads[:, j] = (g_up - g_dn) / (2.0 * h)
    var = np.einsum("qp,pr,qr->q", grads, fit.Sigma_hat, grads)
    return np.sqrt(np.maximum(var, 0.0))
