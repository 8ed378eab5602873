"""Envelope estimation of the interest block of the mean-value scale.

Two estimators of the envelope subspace of ``Sigma_vv`` (the trailing
block of the Fisher information) carrying ``upsilon`` (the trailing
block of the mean-value coefficient vector):

* reducing subspaces: with a multiplicity-one spectrum every reducing
  subspace is a sum of eigenspaces, so candidates are the 2^k - 1
  nonempty index sets of eigenvectors, ranked by an information
  criterion on the projected submodel likelihood;
* the sequential one-direction algorithm, which builds a basis one unit
  vector at a time by minimizing
  ``log(w' M w) + log(w' (M + U)^{-1} w)`` over the sphere in the
  orthocomplement of the directions found so far.

Either way the chosen structure projects ``upsilon_hat``, giving the
estimator ``(gamma_hat, P upsilon_hat)`` whose model matrix is M with
the interest block right-multiplied by P.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import AsterError, MultiplicityError, NumericalError
from .model import (
    AsterModel,
    FitResult,
    _newton,
    reduced_for_sweep,
)

__all__ = [
    "EigenBasis",
    "EnvelopeStructure",
    "SelectionResult",
    "eigen_decompose",
    "enumerate_reducing_subspaces",
    "envelope_from_subspace",
    "onedim_algorithm",
    "select_structure",
    "build_envelope_matrix",
]

EIGEN_GAP_TOL = 1e-8
MAX_ENUM_K = 20


@dataclass(frozen=True)
class EigenBasis:
    """Spectral decomposition with strictly decreasing eigenvalues."""

    eigenvalues: np.ndarray  # (k,) strictly decreasing
    eigenvectors: np.ndarray  # (k, k) orthogonal, column i <-> eigenvalue i
    multiplicity_gap: float  # smallest adjacent gap relative to the largest

    @property
    def k(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True)
class EnvelopeStructure:
    """A selected envelope: basis, projection, and bookkeeping.

    ``index_set`` uses 1-based eigenvalue-order positions (1 = largest)
    and is ``None`` for structures produced by the one-direction
    algorithm, whose basis is not tied to eigenspaces.
    """

    index_set: tuple[int, ...] | None
    Gamma_hat: np.ndarray  # (k, u)
    P_hat: np.ndarray  # (k, k) projection
    u: int
    method: str  # "subspace" | "1d"
    criterion_value: float = float("nan")


@dataclass
class CandidateRecord:
    """One row of the selection report."""

    label: str
    u: int
    loglik: float
    df: int
    criterion_value: float
    skipped: bool = False
    message: str = ""
    index_set: tuple[int, ...] | None = None


@dataclass
class SelectionResult:
    """Selected structure plus the estimator built from it."""

    structure: EnvelopeStructure
    basis: EigenBasis | None
    tau_env: np.ndarray  # (gamma_hat, P upsilon_hat)
    beta_env: np.ndarray  # minimum-norm coefficient solution
    loglik: float
    candidates: list[CandidateRecord] = field(default_factory=list)
    solutions: dict = field(default_factory=dict)  # label -> eta_hat
    criterion: str = "bic"
    method: str = "subspace"


def eigen_decompose(Sigma_vv: np.ndarray) -> EigenBasis:
    """Sorted spectral decomposition with a deterministic sign convention.

    The largest-magnitude component of each eigenvector is made
    positive.  Raises ``MultiplicityError`` when an adjacent relative
    gap falls under 1e-8, where eigenvector ordering is meaningless.
    """
    S = np.asarray(Sigma_vv, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("Sigma_vv must be square")
    if not np.allclose(S, S.T, atol=1e-8 * (1 + np.abs(S).max())):
        raise NumericalError("Sigma_vv is not symmetric")
    vals, vecs = np.linalg.eigh((S + S.T) / 2.0)
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    if vals[-1] <= 0:
        raise NumericalError("Sigma_vv is not positive definite")
    k = len(vals)
    gap = np.inf
    if k > 1:
        gap = float(np.min(vals[:-1] - vals[1:]) / vals[0])
        if gap < EIGEN_GAP_TOL:
            raise MultiplicityError(
                f"adjacent eigenvalue gap {gap:.2e} below {EIGEN_GAP_TOL:g}; "
                "eigenvalues must have multiplicity one"
            )
    for i in range(k):
        col = vecs[:, i]
        if col[np.argmax(np.abs(col))] < 0:
            vecs[:, i] = -col
    return EigenBasis(eigenvalues=vals, eigenvectors=vecs, multiplicity_gap=gap)


def enumerate_reducing_subspaces(k: int) -> list[tuple[int, ...]]:
    """All nonempty subsets of {1..k}, by size then lexicographically."""
    if not 1 <= k <= MAX_ENUM_K:
        raise ValueError(
            f"k = {k} out of range [1, {MAX_ENUM_K}]: 2^k - 1 candidate "
            "subspaces is practical only for small interest blocks"
        )
    out: list[tuple[int, ...]] = []
    for size in range(1, k + 1):
        out.extend(itertools.combinations(range(1, k + 1), size))
    return out


def envelope_from_subspace(
    basis: EigenBasis, index_set, upsilon_hat: np.ndarray
) -> tuple[EnvelopeStructure, np.ndarray]:
    """Projection of upsilon_hat onto the chosen sum of eigenspaces."""
    idx = tuple(sorted(int(i) for i in index_set))
    if not idx or idx[0] < 1 or idx[-1] > basis.k or len(set(idx)) != len(idx):
        raise ValueError(f"invalid index set {index_set!r} for k = {basis.k}")
    cols = [i - 1 for i in idx]
    Gamma = basis.eigenvectors[:, cols]
    ups = np.asarray(upsilon_hat, dtype=float)
    if len(idx) == basis.k:
        # full set: the projection is the identity, exactly
        P = np.eye(basis.k)
        ups_env = ups.copy()
    else:
        P = Gamma @ Gamma.T
        ups_env = P @ ups
    structure = EnvelopeStructure(
        index_set=idx, Gamma_hat=Gamma, P_hat=P, u=len(idx), method="subspace"
    )
    return structure, ups_env


def _sphere_minimize(
    Mmat: np.ndarray, Ainv: np.ndarray, starts: np.ndarray,
    max_iter: int = 2000, gtol: float = 1e-12
) -> tuple[np.ndarray, float]:
    """Minimize log(w'Mw) + log(w'Aw) over unit vectors by projected
    gradient with backtracking, batched over start columns."""
    W = starts / np.linalg.norm(starts, axis=0, keepdims=True)
    d, s = W.shape
    step = np.full(s, 1.0)
    active = np.ones(s, dtype=bool)

    def fvals(W):
        q1 = np.einsum("ds,de,es->s", W, Mmat, W)
        q2 = np.einsum("ds,de,es->s", W, Ainv, W)
        return np.log(q1) + np.log(q2), q1, q2

    f, q1, q2 = fvals(W)
    for _ in range(max_iter):
        MW = Mmat @ W
        AW = Ainv @ W
        grad = 2.0 * MW / q1 + 2.0 * AW / q2
        # Riemannian gradient: project out the radial component
        rg = grad - W * np.einsum("ds,ds->s", W, grad)
        gn = np.linalg.norm(rg, axis=0)
        active = gn > gtol * (1.0 + np.abs(f))
        if not active.any():
            break
        trial = W - step * rg
        trial /= np.linalg.norm(trial, axis=0, keepdims=True)
        ft, q1t, q2t = fvals(trial)
        improved = (ft < f) & active
        W[:, improved] = trial[:, improved]
        f = np.where(improved, ft, f)
        q1 = np.where(improved, q1t, q1)
        q2 = np.where(improved, q2t, q2)
        step[improved] *= 1.6
        shrink = active & ~improved
        step[shrink] *= 0.4
        if (step < 1e-18).all():
            break
    best = int(np.argmin(f))
    return W[:, best].copy(), float(f[best])


def onedim_algorithm(
    M_in: np.ndarray,
    U_in: np.ndarray,
    u: int,
    *,
    n_random_starts: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Sequential one-direction basis estimation.

    At each of ``u`` steps the objective
    ``log(w' M_j w) + log(w' (M_j + U_j)^{-1} w)`` is minimized over
    unit vectors in the orthocomplement of the accumulated basis, by
    multi-start projected gradient (every eigenvector of ``M_j`` plus
    ``n_random_starts`` random unit vectors; the objective is non-convex
    with potentially many local minima, and the eigenvector starts sit
    near the candidate basins).  Deterministic given ``seed``.
    """
    Mmat = np.asarray(M_in, dtype=float)
    Umat = np.asarray(U_in, dtype=float)
    k = Mmat.shape[0]
    if not 1 <= u <= k:
        raise ValueError(f"u = {u} out of range [1, {k}]")
    if u == k:
        return np.eye(k)
    rng = np.random.default_rng(seed)
    basis: list[np.ndarray] = []
    Mj, Uj = Mmat, Umat
    lift = np.eye(k)  # columns: orthonormal basis of the current complement
    for _ in range(u):
        d = Mj.shape[0]
        Ainv = np.linalg.inv(Mj + Uj)
        evec = np.linalg.eigh((Mj + Mj.T) / 2.0)[1]
        starts = np.hstack([evec, rng.normal(size=(d, n_random_starts))])
        w, _ = _sphere_minimize(Mj, Ainv, starts)
        g = lift @ w
        basis.append(g)
        # restrict to the orthocomplement of w for the next step
        Q = _complement_basis(w)
        Mj = Q.T @ Mj @ Q
        Uj = Q.T @ Uj @ Q
        lift = lift @ Q
    G = np.column_stack(basis)
    # Gram-Schmidt guard; the construction is orthonormal already
    Gq, _ = np.linalg.qr(G)
    return Gq * np.where(np.sum(Gq * G, axis=0) < 0, -1.0, 1.0)


def _complement_basis(w: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the orthocomplement of a unit vector."""
    d = len(w)
    full = np.linalg.qr(np.column_stack([w, np.eye(d)]))[0]
    return full[:, 1:d]


def build_envelope_matrix(M: np.ndarray, P_hat: np.ndarray) -> np.ndarray:
    """Right-multiply the trailing interest block of M by the projection.

    Accepts (n, J, p) or flat (m, p); the result has the same shape and
    rank nuisance_dim + u by construction.
    """
    P = np.asarray(P_hat, dtype=float)
    k = P.shape[0]
    out = np.array(M, dtype=float, copy=True)
    out[..., -k:] = out[..., -k:] @ P
    return out


def _structure_rotation(p: int, P_hat: np.ndarray) -> np.ndarray:
    R = np.eye(p)
    k = P_hat.shape[0]
    R[p - k:, p - k:] = P_hat
    return R


def _interest_basis(p: int, Gamma: np.ndarray) -> np.ndarray:
    """Orthonormal basis of range(diag(I, P)): identity on the nuisance
    block, the envelope basis columns on the interest block."""
    k, u = Gamma.shape
    B = np.zeros((p, p - k + u))
    B[: p - k, : p - k] = np.eye(p - k)
    B[p - k:, p - k:] = Gamma
    return B


CANDIDATE_TOL = 1e-5  # ranking tolerance; the winner is re-solved tightly


def _candidate_loglik(
    model: AsterModel,
    fit: FitResult,
    Gamma: np.ndarray,
    warm: tuple | None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Exact submodel log likelihood maximized over range(diag(I, P)).

    Works in the orthonormal reduced coordinates, where the projected
    model has full column rank; equals the rank-deficient-model value by
    Gamma Gamma' = P.  ``warm`` carries (beta, reduced Fisher) from an
    earlier solve of the same candidate (typically the parent bootstrap
    replicate); the Fisher then serves as a frozen chord matrix anchored
    near this candidate's own optimum, making iterations score-only
    sweeps.  A cold start evaluates its chord matrix at the
    quadratic-approximation point.  Returns (loglik, beta_hat, F_red)
    with beta_hat in the full coordinates.
    """
    p = model.n_coef
    B = _interest_basis(p, Gamma)
    reduced = reduced_for_sweep(model, B)
    if warm is None:
        # quadratic-approximation start around the full-model optimum
        FB = fit.Sigma_hat @ B
        eta0 = np.linalg.solve(B.T @ FB, B.T @ (fit.Sigma_hat @ fit.beta_hat))
        fisher0 = None  # evaluated at the start point inside the solver
    else:
        warm_beta, warm_fisher = warm
        eta0 = B.T @ warm_beta
        fisher0 = warm_fisher
    eta, cjoint, _, fisher, _ = _newton(
        reduced,
        reduced.tau_obs,
        eta0,
        tol=CANDIDATE_TOL,
        fisher_mode="chord",
        polish=False,
        fisher0=fisher0,
    )
    return float(reduced.tau_obs @ eta - cjoint), B @ eta, fisher


def _criterion(loglik: float, df: int, n: int, criterion: str) -> float:
    if criterion == "aic":
        return -2.0 * loglik + 2.0 * df
    return -2.0 * loglik + df * float(np.log(n))


def select_structure(
    model: AsterModel,
    fit: FitResult,
    method: str = "subspace",
    criterion: str = "bic",
    *,
    basis: EigenBasis | None = None,
    onedim_seed: int = 0,
    warm_starts: dict | None = None,
) -> SelectionResult:
    """Rank envelope candidates by an information criterion.

    Candidates are every nonempty eigenvector index set (``subspace``)
    or every dimension u = 1..k (``1d``).  Each candidate's estimator
    ``(gamma_hat, P upsilon_hat)`` is scored by the exact submodel log
    likelihood at its own maximum, with df = nuisance_dim + u.  Ties
    break toward smaller u, then lexicographic index set.  Candidates
    whose projected target is unattainable are recorded as skipped.
    """
    if method not in ("subspace", "1d"):
        raise ValueError(f"unknown method {method!r}")
    if criterion not in ("aic", "bic"):
        raise ValueError(f"unknown criterion {criterion!r}")
    k = model.interest_dim
    if k < 1:
        raise ValueError("model has no interest block")
    p = model.n_coef
    n = model.n_individuals
    nuis = model.nuisance_dim
    if basis is None:
        basis = eigen_decompose(fit.Sigma_vv_hat)
    ups_hat = fit.tau_hat[nuis:]
    warm_starts = warm_starts or {}

    candidates: list[CandidateRecord] = []
    solutions: dict[str, np.ndarray] = {}
    gammas: dict[str, np.ndarray] = {}

    if method == "subspace":
        specs = [
            ("+".join(map(str, idx)), idx, basis.eigenvectors[:, [i - 1 for i in idx]])
            for idx in enumerate_reducing_subspaces(k)
        ]
    else:
        # the sequential construction is nested: one (k-1)-direction run
        # yields every smaller dimension as a prefix
        if k > 1:
            G_all = onedim_algorithm(
                fit.Sigma_vv_hat, np.outer(ups_hat, ups_hat), k - 1, seed=onedim_seed
            )
        specs = [
            (f"u={u}", None, G_all[:, :u] if u < k else np.eye(k))
            for u in range(1, k + 1)
        ]

    for label, idx, Gamma in specs:
        u = Gamma.shape[1]
        df = nuis + u
        gammas[label] = Gamma
        if u == k:
            # full-dimension envelope is the plain MLE
            ll = fit.loglik
            solutions[label] = (fit.beta_hat.copy(), None)
            candidates.append(
                CandidateRecord(label, u, ll, df, _criterion(ll, df, n, criterion),
                                index_set=idx)
            )
            continue
        warm = warm_starts.get(label)
        try:
            ll, beta_c, F_red = _candidate_loglik(model, fit, Gamma, warm)
        except AsterError as exc:
            candidates.append(
                CandidateRecord(label, u, float("nan"), df, float("inf"),
                                skipped=True, message=str(exc), index_set=idx)
            )
            continue
        solutions[label] = (beta_c, F_red)
        candidates.append(
            CandidateRecord(label, u, ll, df, _criterion(ll, df, n, criterion),
                            index_set=idx)
        )

    usable = [c for c in candidates if not c.skipped]
    if not usable:
        raise NumericalError("every envelope candidate failed to fit")
    best = min(
        usable,
        key=lambda c: (c.criterion_value, c.u, c.index_set or (c.u,)),
    )

    if method == "subspace":
        structure, ups_env = envelope_from_subspace(basis, best.index_set, ups_hat)
    else:
        Gamma = gammas[best.label]
        if best.u == k:
            P = np.eye(k)
            ups_env = ups_hat.copy()
        else:
            P = Gamma @ Gamma.T
            ups_env = P @ ups_hat
        structure = EnvelopeStructure(
            index_set=None, Gamma_hat=Gamma, P_hat=P, u=best.u, method="1d"
        )
    structure = EnvelopeStructure(
        index_set=structure.index_set,
        Gamma_hat=structure.Gamma_hat,
        P_hat=structure.P_hat,
        u=structure.u,
        method=structure.method,
        criterion_value=best.criterion_value,
    )
    tau_env = np.concatenate([fit.tau_hat[:nuis], ups_env])

    # tight re-solve of the winner for downstream use
    if structure.u == k:
        beta_env = fit.beta_hat.copy()
        ll = fit.loglik
    else:
        B = _interest_basis(p, structure.Gamma_hat)
        reduced = reduced_for_sweep(model, B)
        beta_w, F_red = solutions[best.label]
        eta, cjoint, _, F_red, _ = _newton(
            reduced, reduced.tau_obs, B.T @ beta_w,
            fisher_mode="chord", polish=False, fisher0=F_red,
        )
        ll = float(reduced.tau_obs @ eta - cjoint)
        beta_env = B @ eta
        solutions[best.label] = (beta_env, F_red)
    return SelectionResult(
        structure=structure,
        basis=basis,
        tau_env=tau_env,
        beta_env=beta_env,
        loglik=ll,
        candidates=candidates,
        solutions=solutions,
        criterion=criterion,
        method=method,
    )
