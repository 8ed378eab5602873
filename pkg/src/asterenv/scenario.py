"""Synthetic-study generator: population data with a known fitness
landscape, optionally with an exact planted envelope structure.

The default scenario is a ten-stage survival / reproduction / offspring
population with a full-quadratic landscape in two covariates and a
four-column nuisance block (one intercept per layer plus a late-stage
survival indicator).

``true_subspace`` plants upsilon exactly inside the designated sum of
eigenspaces of the Fisher interest block.  The plant is a closed-form
change of interest basis: with S the interest Fisher block and upsilon
the interest mean-value block at the base coefficients, the emitted
covariate columns are the centered expansion right-multiplied by

    T = S^{-1/2} V diag(lambda)^{1/2} V^T,

where V is orthogonal with the designated columns spanning a plane
containing S^{-1/2} upsilon, and lambda is a well-gapped spectrum.  The
transformed design spans the same model space and the same population
distribution (the data law is untouched), while in the emitted
parameterization Sigma_vv = V diag(lambda) V^T exactly and the interest
block of the mean-value vector lies exactly in the designated
eigenvector span.  A fixed-point re-projection loop is not needed; its
alternating updates are unstable here because moving the coefficients
rotates the eigenbasis being projected onto.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import sqrtm

from .dataio import ModelConfig, build_design, expand_covariates, save_data, write_meta
from .errors import AsterError
from .graph import (
    GraphSpec,
    phi_to_theta,
    save_graph,
    simulate,
    survival_fecundity_chain,
    survival_reproduction_graph,
)
from .model import AsterModel, fisher_info, mean_value

__all__ = ["ScenarioSpec", "Scenario", "generate_scenario"]

# Landscape with an interior optimum and moderate conditional rates;
# order: surv_int, repr_int, off_int, late_surv, z1, z2, z1^2, z2^2, z1*z2.
DEFAULT_LAYERED_BETA = (
    -0.62, -2.6, 0.88, -0.35, 0.12, 0.08, -0.22, -0.18, 0.10,
)
DEFAULT_CHAIN_BETA = (0.25, 0.45, 0.28, 0.20, -0.16, -0.13, 0.08)

GAP_FACTOR = 0.72  # enforced adjacent-eigenvalue separation of the plant


@dataclass(frozen=True)
class ScenarioSpec:
    """What to simulate; defaults mirror the layered ten-stage study."""

    n_individuals: int = 3000
    graph_kind: str = "layered"  # "layered" | "chain"
    stages: int = 10
    true_beta: tuple[float, ...] = ()
    covariate_law: str = "uniform"  # "uniform" on [-2, 2] | "normal"
    quadratic: bool = True
    true_subspace: tuple[int, ...] = ()
    mix_angle: float = 0.4  # signal split between the designated directions

    def build_graph(self) -> GraphSpec:
        if self.graph_kind == "layered":
            return survival_reproduction_graph(self.stages)
        if self.graph_kind == "chain":
            return survival_fecundity_chain()
        raise ValueError(f"unknown graph kind {self.graph_kind!r}")

    def base_config(self) -> ModelConfig:
        """Design on the raw covariates (z1, z2 with optional expansion)."""
        if self.graph_kind == "layered":
            late = tuple(
                f"surv{t}" for t in range(self.stages // 2 + 1, self.stages + 1)
            )
            return ModelConfig(
                covariates=("z1", "z2"),
                quadratic=self.quadratic,
                intercept_layers=("surv", "repr", "off"),
                extra_columns=(("late_surv", late),),
            )
        return ModelConfig(
            covariates=("z1", "z2"),
            quadratic=self.quadratic,
            intercept_layers=("surv", "count"),
        )

    def beta(self) -> np.ndarray:
        if self.true_beta:
            return np.asarray(self.true_beta, dtype=float)
        return np.asarray(
            DEFAULT_LAYERED_BETA if self.graph_kind == "layered" else DEFAULT_CHAIN_BETA
        )


@dataclass
class Scenario:
    """A realized synthetic study, ready to fit."""

    spec: ScenarioSpec
    graph: GraphSpec
    config: ModelConfig
    covariates: dict
    Y: np.ndarray
    M: np.ndarray
    offset: np.ndarray
    column_names: tuple[str, ...]
    interest_dim: int
    beta_true: np.ndarray
    tau_true: np.ndarray
    Sigma_true: np.ndarray
    subspace_residual: float = 0.0
    basis_transform: np.ndarray | None = None

    def model(self, check: bool = True) -> AsterModel:
        ga = self.graph.compile()
        return AsterModel.build(
            ga, self.Y, self.M, self.offset,
            interest_dim=self.interest_dim,
            column_names=self.column_names,
            check_rank=check, check_response=check,
        )

    def truth_dict(self) -> dict:
        out = {
            "beta_true": [float(v) for v in self.beta_true],
            "tau_true": [float(v) for v in self.tau_true],
            "column_names": list(self.column_names),
            "interest_dim": self.interest_dim,
            "true_subspace": list(self.spec.true_subspace),
            "subspace_residual": self.subspace_residual,
        }
        if self.basis_transform is not None:
            out["basis_transform"] = [
                [float(v) for v in row] for row in self.basis_transform
            ]
        return out

    def write(self, outdir: str | Path, seed) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_graph(self.graph, outdir / "graph.json")
        self.config.save(outdir / "model.json")
        save_data(outdir / "data.csv", self.graph, self.Y, self.covariates)
        (outdir / "truth.json").write_text(
            json.dumps(self.truth_dict(), indent=2) + "\n"
        )
        write_meta(
            outdir,
            seed=seed,
            configs=(self.config.to_dict(), {"n": self.spec.n_individuals}),
        )


def _draw_covariates(spec: ScenarioSpec, rng: np.random.Generator) -> dict:
    n = spec.n_individuals
    if spec.covariate_law == "uniform":
        return {"z1": rng.uniform(-2, 2, n), "z2": rng.uniform(-2, 2, n)}
    if spec.covariate_law == "normal":
        return {"z1": rng.normal(0, 1, n), "z2": rng.normal(0, 1, n)}
    raise ValueError(f"unknown covariate law {spec.covariate_law!r}")


def _expanded_values(cov: dict, names, quadratic: bool) -> np.ndarray:
    cols = [np.asarray(cov[z], dtype=float) for z in names]
    out = list(cols)
    if quadratic:
        out.extend(c * c for c in cols)
        for i in range(len(cols)):
            for j in range(i + 1, len(cols)):
                out.append(cols[i] * cols[j])
    return np.column_stack(out)


def _plant_transform(
    S: np.ndarray, ups: np.ndarray, index_set: tuple[int, ...], mix_angle: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(T, V, lambda): congruence placing ups exactly in the designated
    eigenvector span of T' S T, with a well-gapped spectrum."""
    k = S.shape[0]
    idx = sorted(index_set)
    if len(idx) != 2 or idx[0] < 1 or idx[-1] > k or idx[0] == idx[1]:
        raise AsterError(
            f"true_subspace must be two distinct indices in 1..{k}, got {index_set}"
        )
    lam = np.linalg.eigvalsh(S)[::-1].copy()
    for i in range(1, k):
        lam[i] = min(lam[i], GAP_FACTOR * lam[i - 1])
    S_isqrt = np.linalg.inv(sqrtm(S))
    w = S_isqrt @ ups
    what = w / np.linalg.norm(w)
    # deterministic unit vector orthogonal to the whitened signal
    q = np.zeros(k)
    q[int(np.argmin(np.abs(what)))] = 1.0
    q -= (q @ what) * what
    q /= np.linalg.norm(q)
    va = np.cos(mix_angle) * what + np.sin(mix_angle) * q
    vb = np.sin(mix_angle) * what - np.cos(mix_angle) * q
    comp = np.linalg.svd(np.eye(k) - np.outer(va, va) - np.outer(vb, vb))[0][:, : k - 2]
    V = np.empty((k, k))
    V[:, idx[0] - 1] = va
    V[:, idx[1] - 1] = vb
    rest = [i for i in range(k) if i + 1 not in idx]
    for c, i in enumerate(rest):
        V[:, i] = comp[:, c]
    T = S_isqrt @ (V * np.sqrt(lam)) @ V.T
    return T, V, lam


def generate_scenario(
    spec: ScenarioSpec, seed: int, outdir: str | Path | None = None
) -> Scenario:
    """Simulate a population; deterministic per seed."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    graph = spec.build_graph()
    ga = graph.compile()
    base_cfg = spec.base_config()
    cov = _draw_covariates(spec, rng)
    beta = spec.beta()

    if not spec.true_subspace:
        M, offset, names, k = build_design(graph, base_cfg, cov)
        if len(beta) != M.shape[2]:
            raise ValueError(
                f"true_beta has {len(beta)} entries, design has {M.shape[2]} columns"
            )
        config = base_cfg
        covariates = cov
        beta_true = beta
        transform = None
        residual = 0.0
    else:
        # exact plant: center the expanded covariates (the fitness-layer
        # intercept absorbs the shift), then rotate the interest basis
        zexp = _expanded_values(cov, base_cfg.covariates, base_cfg.quadratic)
        zc = zexp - zexp.mean(axis=0)
        k = zexp.shape[1]
        exp_names = expand_covariates(base_cfg.covariates, base_cfg.quadratic)
        cov_centered = {f"c{i + 1}": zc[:, i] for i in range(k)}
        config = ModelConfig(
            covariates=tuple(f"c{i + 1}" for i in range(k)),
            quadratic=False,
            intercept_layers=base_cfg.intercept_layers,
            extra_columns=base_cfg.extra_columns,
            covariate_nodes=base_cfg.covariate_nodes,
            offset=base_cfg.offset,
        )
        Mc, offc, _, _ = build_design(graph, config, cov_centered)
        if len(beta) != Mc.shape[2]:
            raise ValueError(
                f"true_beta has {len(beta)} entries, design has {Mc.shape[2]} columns"
            )
        nuis = Mc.shape[2] - k
        beta_c = beta.copy()
        fit_layer = (
            "off_int" if spec.graph_kind == "layered" else "count_int"
        )
        fit_col = list(base_cfg.intercept_layers).index(fit_layer.removesuffix("_int"))
        beta_c[fit_col] += float(zexp.mean(axis=0) @ beta[nuis:])
        shell = AsterModel.build(
            ga, np.zeros(Mc.shape[:2]), Mc, offc, interest_dim=k,
            check_rank=True, check_response=False,
        )
        S = fisher_info(shell, beta_c)[nuis:, nuis:]
        tau_c = np.einsum("njp,nj->p", Mc, mean_value(shell, beta_c))
        T, V, lam = _plant_transform(
            S, tau_c[nuis:], tuple(spec.true_subspace), spec.mix_angle
        )
        C = zc @ T
        covariates = {f"c{i + 1}": C[:, i] for i in range(k)}
        covariates.update(cov)  # keep the raw covariates as data columns
        beta_true = np.concatenate([beta_c[:nuis], np.linalg.solve(T, beta_c[nuis:])])
        transform = T
        residual = None  # computed below against the realized design
        M, offset, names, k = build_design(graph, config, covariates)

    phi = offset + np.einsum("njp,p->nj", M, beta_true)
    theta = phi_to_theta(ga, phi)
    Y = simulate(ga, theta, rng)
    shell = AsterModel.build(
        ga, np.zeros(M.shape[:2]), M, offset, interest_dim=k,
        column_names=names, check_rank=False, check_response=False,
    )
    mu = mean_value(shell, beta_true)
    tau_true = np.einsum("njp,nj->p", M, mu)
    Sigma_true = fisher_info(shell, beta_true)

    if spec.true_subspace:
        nuis = len(beta_true) - k
        vals, vecs = np.linalg.eigh(Sigma_true[nuis:, nuis:])
        vecs = vecs[:, ::-1]
        cols = [i - 1 for i in sorted(spec.true_subspace)]
        G = vecs[:, cols]
        ups = tau_true[nuis:]
        residual = float(
            np.linalg.norm(ups - G @ (G.T @ ups)) / np.linalg.norm(ups)
        )

    scenario = Scenario(
        spec=spec,
        graph=graph,
        config=config,
        covariates=covariates,
        Y=Y,
        M=M,
        offset=offset,
        column_names=names,
        interest_dim=k,
        beta_true=beta_true,
        tau_true=tau_true,
        Sigma_true=Sigma_true,
        subspace_residual=residual or 0.0,
        basis_transform=transform,
    )
    if outdir is not None:
        scenario.write(outdir, seed)
    return scenario
