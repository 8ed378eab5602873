"""Double parametric bootstrap for the envelope fitness estimator.

Two pipelines share one skeleton.  The envelope pipeline simulates at
the envelope estimate, refits the submodel MLE, re-runs envelope
selection with the same criterion, projects, and evaluates fitness; the
reference pipeline forces the full-dimension (identity) structure, which
makes it a plain MLE parametric bootstrap.  The first level of B
replicates yields the smoothed estimator (the average of replicate
fitness values); the second level simulates K datasets from each
first-level replicate and the reported standard error is the standard
deviation across replicates of the second-level means.  That smoothed-
estimator formula is recorded in the report metadata under
``se_formula``.

Replicates draw from pre-split generator streams keyed by (level, b, k,
attempt), so reports are byte-identical for a given seed regardless of
worker count.  Replicates whose refit degenerates (boundary data or a
collapsed eigenvalue gap) are redrawn from the next attempt stream, with
the total number of redraws capped at a fraction of the replicate
count.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envelope import (
    SelectionResult,
    _interest_basis,
    eigen_decompose,
    envelope_from_subspace,
    select_structure,
)
from .errors import BootstrapError, NumericalError
from .fitness import FitnessQuery, fitness_from_beta
from .graph import phi_to_theta, simulate
from .model import (
    AsterModel,
    FitResult,
    _newton,
    fit_mle,
    mean_value,
    reduced_for_sweep,
)
from .dataio import write_meta

__all__ = [
    "BootstrapConfig",
    "PipelineResult",
    "BootstrapReport",
    "run_first_level",
    "run_second_level",
    "mle_reference_bootstrap",
    "run_double_bootstrap",
    "ratio_table",
    "write_report",
]

SE_FORMULA = "sd-over-b-of-second-level-means"
MAX_ATTEMPTS_PER_REPLICATE = 50


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication counts, selection settings, and the profile query."""

    B: int
    K: int
    seed: int
    query: FitnessQuery
    criterion: str = "bic"
    method: str = "subspace"
    n_jobs: int = 1
    fixed_structure: tuple[int, ...] | None = None
    redraw_cap_fraction: float = 0.10
    onedim_seed: int = 0

    def __post_init__(self):
        if self.B < 2 or self.K < 2:
            raise ValueError("B and K must both be at least 2")
        if self.seed is None:
            raise ValueError("a seed is mandatory; there is no entropy default")


@dataclass
class ReplicateRecord:
    level: int
    b: int
    k: int | None
    label: str
    tau_env: np.ndarray | None
    g: np.ndarray


@dataclass
class PipelineResult:
    """One pipeline's double bootstrap."""

    name: str
    g_hat: np.ndarray  # per profile, mean of first-level replicates
    se: np.ndarray  # per profile
    first_g: np.ndarray  # (B, q)
    second_g: np.ndarray  # (B, K, q)
    records: list[ReplicateRecord] = field(default_factory=list)
    redraws_first: int = 0
    redraws_second: int = 0
    max_oee: float = 0.0  # worst observed-equals-expected violation


@dataclass
class BootstrapReport:
    envelope: PipelineResult
    reference: PipelineResult
    ratio: np.ndarray  # se_mle / se_env per profile
    config_echo: dict = field(default_factory=dict)

    @property
    def g_env_hat(self):
        return self.envelope.g_hat

    @property
    def se_env(self):
        return self.envelope.se

    @property
    def g_mle_hat(self):
        return self.reference.g_hat

    @property
    def se_mle(self):
        return self.reference.se


# ---------------------------------------------------------------------------
# Worker payload.  Forked workers inherit the module global; the sequential
# path uses it directly.

_PAYLOAD: dict = {}


def _set_payload(payload: dict) -> None:
    global _PAYLOAD
    _PAYLOAD = payload


def _rng_for(seed: int, key: tuple) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _theta_for_beta(model: AsterModel, beta: np.ndarray) -> np.ndarray:
    phi = model.offset + np.einsum("njp,p->nj", model.M, beta)
    return phi_to_theta(model.graph, phi)


def _full_set(k: int) -> tuple[int, ...]:
    return tuple(range(1, k + 1))


def _replicate(
    model: AsterModel,
    cfg_d: dict,
    sim_theta: np.ndarray,
    seed_key: tuple,
    warm_beta: np.ndarray,
    warm_fisher: np.ndarray | None,
    warm_solutions: dict | None,
):
    """Simulate, refit, select, evaluate.  Returns a result dict.

    The refit and the candidate solves are warm-started from the fit the
    data were simulated under (coefficients, Fisher matrices, and
    per-candidate solutions), which the parent replicate provides.
    Degenerate draws (boundary refits, collapsed eigen gaps, candidate
    exhaustion) are redrawn from the next attempt stream.
    """
    k = model.interest_dim
    nuis = model.nuisance_dim
    full = cfg_d["fixed_structure"] == _full_set(k)
    redraws = 0
    for attempt in range(MAX_ATTEMPTS_PER_REPLICATE):
        rng = _rng_for(cfg_d["seed"], seed_key + (attempt,))
        Y = simulate(model.graph, sim_theta, rng)
        rep_model = model.with_response(Y)
        try:
            fit = fit_mle(
                rep_model, beta0=warm_beta,
                fisher_mode="newton" if warm_fisher is None else "chord",
                fisher0=warm_fisher,
            )
            if full:
                # identity projection: the reference MLE pipeline
                beta_env = fit.beta_hat
                tau_env = fit.tau_hat
                P_hat = None
                label = "+".join(map(str, _full_set(k)))
                sols = None
            elif cfg_d["fixed_structure"] is not None:
                basis = eigen_decompose(fit.Sigma_vv_hat)
                structure, ups_env = envelope_from_subspace(
                    basis, cfg_d["fixed_structure"], fit.tau_hat[nuis:]
                )
                B = _interest_basis(model.n_coef, structure.Gamma_hat)
                reduced = reduced_for_sweep(rep_model, B)
                eta, _, _, _, _ = _newton(
                    reduced, reduced.tau_obs, B.T @ fit.beta_hat,
                    fisher_mode="chord", polish=False,
                    fisher0=B.T @ fit.Sigma_hat @ B,
                )
                beta_env = B @ eta
                tau_env = np.concatenate([fit.tau_hat[:nuis], ups_env])
                P_hat = structure.P_hat
                label = "+".join(map(str, cfg_d["fixed_structure"]))
                sols = None
            else:
                sel = select_structure(
                    rep_model,
                    fit,
                    cfg_d["method"],
                    cfg_d["criterion"],
                    onedim_seed=cfg_d["onedim_seed"],
                    warm_starts=warm_solutions,
                )
                beta_env = sel.beta_env
                tau_env = sel.tau_env
                P_hat = None if sel.structure.u == k else sel.structure.P_hat
                label = (
                    "+".join(map(str, sel.structure.index_set))
                    if sel.structure.index_set is not None
                    else f"u={sel.structure.u}"
                )
                sols = sel.solutions
            # observed-equals-expected audit of this refit, in its own
            # (possibly projected) model matrix
            mu = mean_value(rep_model, beta_env)
            resid = np.einsum("njp,nj->p", rep_model.M, mu - rep_model.Y)
            if P_hat is not None:
                resid = np.concatenate([resid[:nuis], P_hat @ resid[nuis:]])
            oee = float(np.abs(resid).max() / (1.0 + np.abs(tau_env).max()))
            return {
                "tau_env": tau_env,
                "beta_env": beta_env,
                "fisher": fit.Sigma_hat,
                "label": label,
                "solutions": sols,
                "g": fitness_from_beta(rep_model, beta_env, cfg_d["query"]),
                "oee": oee,
                "redraws": redraws,
            }
        except NumericalError:
            redraws += 1
            continue
    raise BootstrapError(
        f"replicate {seed_key} failed {MAX_ATTEMPTS_PER_REPLICATE} attempts"
    )


def _first_level_task(b_range):
    p = _PAYLOAD
    out = []
    for b in b_range:
        res = _replicate(
            p["model"], p["cfg"], p["sim_theta"], (1, b),
            p["warm_beta"], p["warm_fisher"], p["warm_solutions"],
        )
        out.append((b, res))
    return out


def _second_level_task(args):
    b_range, k_range = args
    p = _PAYLOAD
    out = []
    for b in b_range:
        parent = p["first"][b]
        theta_b = _theta_for_beta(p["model"], parent["beta_env"])
        for kk in k_range:
            res = _replicate(
                p["model"], p["cfg"], theta_b, (2, b, kk),
                parent["beta_env"], parent["fisher"], parent["solutions"],
            )
            out.append((b, kk, res))
    return out


def _chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def _run_map(task_fn, tasks, n_jobs):
    if n_jobs <= 1 or len(tasks) <= 1:
        return [task_fn(t) for t in tasks]
    import multiprocessing as mp

    with ProcessPoolExecutor(
        max_workers=n_jobs, mp_context=mp.get_context("fork")
    ) as pool:
        return list(pool.map(task_fn, tasks))


def _cfg_dict(cfg: BootstrapConfig) -> dict:
    return {
        "seed": cfg.seed,
        "criterion": cfg.criterion,
        "method": cfg.method,
        "fixed_structure": cfg.fixed_structure,
        "onedim_seed": cfg.onedim_seed,
        "query": cfg.query,
    }


def run_first_level(
    model: AsterModel,
    cfg: BootstrapConfig,
    sim_beta: np.ndarray,
    warm_solutions: dict | None = None,
    warm_fisher: np.ndarray | None = None,
) -> dict:
    """B replicates simulated at ``sim_beta``; returns per-b results."""
    _set_payload(
        {
            "model": model,
            "cfg": _cfg_dict(cfg),
            "sim_theta": _theta_for_beta(model, sim_beta),
            "warm_beta": sim_beta,
            "warm_fisher": warm_fisher,
            "warm_solutions": warm_solutions,
        }
    )
    chunk = max(1, cfg.B // max(cfg.n_jobs * 4, 1))
    tasks = _chunks(list(range(cfg.B)), chunk)
    results = {}
    for part in _run_map(_first_level_task, tasks, cfg.n_jobs):
        for b, res in part:
            results[b] = res
    redraws = sum(results[b]["redraws"] for b in range(cfg.B))
    cap = max(1, int(cfg.redraw_cap_fraction * cfg.B))
    if redraws > cap:
        raise BootstrapError(
            f"{redraws} boundary redraws exceed the cap {cap} "
            f"({cfg.redraw_cap_fraction:.0%} of B = {cfg.B}); the data are too "
            "small or extreme for the parametric bootstrap"
        )
    return results


def run_second_level(
    model: AsterModel, cfg: BootstrapConfig, first: dict
) -> tuple[np.ndarray, int, dict]:
    """K replicates from each first-level replicate; returns
    (second_g with shape (B, K, q), redraw count, labels by (b, k))."""
    _PAYLOAD["first"] = first
    q = cfg.query.n_profiles
    pairs = []
    for b in range(cfg.B):
        pairs.append(([b], list(range(cfg.K))))
    results = np.empty((cfg.B, cfg.K, q))
    redraws = 0
    labels = {}
    oee = 0.0
    for part in _run_map(_second_level_task, pairs, cfg.n_jobs):
        for b, kk, res in part:
            results[b, kk] = res["g"]
            redraws += res["redraws"]
            labels[(b, kk)] = res["label"]
            oee = max(oee, res["oee"])
    cap = max(1, int(cfg.redraw_cap_fraction * cfg.B * cfg.K))
    if redraws > cap:
        raise BootstrapError(
            f"{redraws} second-level redraws exceed the cap {cap}"
        )
    return results, redraws, labels, oee


def _run_pipeline(
    model: AsterModel,
    cfg: BootstrapConfig,
    sim_beta: np.ndarray,
    name: str,
    warm_solutions: dict | None = None,
    warm_fisher: np.ndarray | None = None,
) -> PipelineResult:
    first = run_first_level(model, cfg, sim_beta, warm_solutions, warm_fisher)
    second_g, redraws2, labels2, oee2 = run_second_level(model, cfg, first)
    first_g = np.stack([first[b]["g"] for b in range(cfg.B)])
    g_hat = first_g.mean(axis=0)
    # smoothed-estimator standard error: spread of second-level means
    se = np.std(second_g.mean(axis=1), axis=0, ddof=1)
    records = [
        ReplicateRecord(1, b, None, first[b]["label"], first[b]["tau_env"],
                        first[b]["g"])
        for b in range(cfg.B)
    ]
    for b in range(cfg.B):
        for kk in range(cfg.K):
            records.append(
                ReplicateRecord(2, b, kk, labels2.get((b, kk), ""), None,
                                second_g[b, kk])
            )
    return PipelineResult(
        name=name,
        g_hat=g_hat,
        se=se,
        first_g=first_g,
        second_g=second_g,
        records=records,
        redraws_first=sum(first[b]["redraws"] for b in range(cfg.B)),
        redraws_second=redraws2,
        max_oee=max(oee2, max(first[b]["oee"] for b in range(cfg.B))),
    )


def mle_reference_bootstrap(
    model: AsterModel, fit: FitResult, cfg: BootstrapConfig
) -> PipelineResult:
    """Plain MLE double bootstrap: identity projection, simulate at the
    MLE; the comparison columns of the report."""
    ref_cfg = BootstrapConfig(
        B=cfg.B, K=cfg.K, seed=cfg.seed, query=cfg.query,
        criterion=cfg.criterion, method=cfg.method, n_jobs=cfg.n_jobs,
        fixed_structure=_full_set(model.interest_dim),
        redraw_cap_fraction=cfg.redraw_cap_fraction,
        onedim_seed=cfg.onedim_seed,
    )
    return _run_pipeline(model, ref_cfg, fit.beta_hat, "mle",
                         warm_fisher=fit.Sigma_hat)


def run_double_bootstrap(
    model: AsterModel,
    fit: FitResult,
    selection: SelectionResult,
    cfg: BootstrapConfig,
) -> BootstrapReport:
    """Both pipelines plus the ratio of their standard errors."""
    env = _run_pipeline(
        model, cfg, selection.beta_env, "envelope", selection.solutions,
        warm_fisher=fit.Sigma_hat,
    )
    ref = mle_reference_bootstrap(model, fit, cfg)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(
            env.se > 0,
            ref.se / np.where(env.se > 0, env.se, 1.0),
            np.where(ref.se == 0, 1.0, np.inf),
        )
    echo = {
        "profile_labels": list(cfg.query.labels) if cfg.query.labels else None,
        "B": cfg.B,
        "K": cfg.K,
        "seed": cfg.seed,
        "criterion": cfg.criterion,
        "method": cfg.method,
        "fixed_structure": list(cfg.fixed_structure) if cfg.fixed_structure else None,
        "se_formula": SE_FORMULA,
        "redraws": {
            "envelope_first": env.redraws_first,
            "envelope_second": env.redraws_second,
            "mle_first": ref.redraws_first,
            "mle_second": ref.redraws_second,
        },
    }
    return BootstrapReport(envelope=env, reference=ref, ratio=ratio,
                           config_echo=echo)


def ratio_table(report: BootstrapReport, top_n: int = 7) -> list[dict]:
    """Rows per profile, sorted by the envelope estimate descending;
    ratios come from the unrounded standard errors."""
    q = len(report.g_env_hat)
    labels = report.config_echo.get("profile_labels") or [
        f"profile{i + 1}" for i in range(q)
    ]
    order = np.argsort(-report.g_env_hat, kind="stable")
    rows = []
    for rank, i in enumerate(order):
        rows.append(
            {
                "profile": labels[i],
                "g_env": float(report.g_env_hat[i]),
                "se_env": float(report.se_env[i]),
                "g_mle": float(report.g_mle_hat[i]),
                "se_mle": float(report.se_mle[i]),
                "ratio": float(report.ratio[i]),
                "top": rank < top_n,
            }
        )
    return rows


def write_report(report: BootstrapReport, outdir: str | Path, top_n: int = 7) -> None:
    """report.csv, replicates.csv, meta.json; byte-stable per config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profile", "g_env", "se_env", "g_mle", "se_mle", "ratio", "top"])
        for row in ratio_table(report, top_n):
            w.writerow(
                [
                    row["profile"],
                    repr(row["g_env"]),
                    repr(row["se_env"]),
                    repr(row["g_mle"]),
                    repr(row["se_mle"]),
                    repr(row["ratio"]),
                    int(row["top"]),
                ]
            )
    with open(outdir / "replicates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        q = report.envelope.first_g.shape[1]
        gcols = [f"g{i + 1}" for i in range(q)]
        w.writerow(["pipeline", "level", "b", "k", "selection", "tau_env", *gcols])
        for pipe in (report.envelope, report.reference):
            for rec in pipe.records:
                tau = (
                    ";".join(repr(float(v)) for v in rec.tau_env)
                    if rec.tau_env is not None
                    else ""
                )
                w.writerow(
                    [
                        pipe.name,
                        rec.level,
                        rec.b,
                        "" if rec.k is None else rec.k,
                        rec.label,
                        tau,
                        *[repr(float(v)) for v in rec.g],
                    ]
                )
    write_meta(outdir, seed=report.config_echo.get("seed"),
               extra={"bootstrap": report.config_echo},
               configs=(report.config_echo,))
