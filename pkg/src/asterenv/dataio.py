"""File formats: long-format data CSV, model config, result files.

The data file is long format with one row per (individual, node):
``id,node,value,<covariate...>``.  Covariate columns repeat per row of
an individual.  The model config declares the offset, the design columns
(layer intercepts, extra indicator columns, covariates with an optional
quadratic expansion), and which columns form the trailing interest
block.  Loading then saving reproduces files byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AsterError
from .graph import GraphSpec

__all__ = [
    "ModelConfig",
    "load_data",
    "save_data",
    "build_design",
    "profile_rows_builder",
    "expand_covariates",
    "write_meta",
]

TOOL_VERSION = "0.1.0"


@dataclass(frozen=True)
class ModelConfig:
    """Declarative design-matrix description.

    Columns appear in order: one intercept per entry of
    ``intercept_layers`` (matching node layer tags), the extra indicator
    columns, then the covariate block, which is the interest block.
    """

    covariates: tuple[str, ...]
    quadratic: bool = False
    intercept_layers: tuple[str, ...] = ()
    extra_columns: tuple[tuple[str, tuple[str, ...]], ...] = ()
    covariate_nodes: str | tuple[str, ...] = "fitness"
    offset: float = 0.0

    def to_dict(self) -> dict:
        return {
            "offset": self.offset,
            "intercept_layers": list(self.intercept_layers),
            "extra_columns": [
                {"name": name, "nodes": list(nodes)}
                for name, nodes in self.extra_columns
            ],
            "covariates": list(self.covariates),
            "quadratic": self.quadratic,
            "covariate_nodes": (
                self.covariate_nodes
                if isinstance(self.covariate_nodes, str)
                else list(self.covariate_nodes)
            ),
            "interest": list(expand_covariates(self.covariates, self.quadratic)),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cov_nodes = d.get("covariate_nodes", "fitness")
        cfg = ModelConfig(
            covariates=tuple(d.get("covariates", ())),
            quadratic=bool(d.get("quadratic", False)),
            intercept_layers=tuple(d.get("intercept_layers", ())),
            extra_columns=tuple(
                (e["name"], tuple(e["nodes"])) for e in d.get("extra_columns", ())
            ),
            covariate_nodes=(
                cov_nodes if isinstance(cov_nodes, str) else tuple(cov_nodes)
            ),
            offset=float(d.get("offset", 0.0)),
        )
        declared = d.get("interest")
        if declared is not None:
            expanded = list(expand_covariates(cfg.covariates, cfg.quadratic))
            if list(declared) != expanded:
                raise AsterError(
                    "interest columns must be the trailing covariate block; "
                    f"declared {declared}, expected {expanded}"
                )
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "ModelConfig":
        return ModelConfig.from_dict(json.loads(Path(path).read_text()))


def expand_covariates(names, quadratic: bool) -> tuple[str, ...]:
    """Column names of the covariate block: linear terms, then squares
    and pairwise products under the quadratic flag."""
    names = list(names)
    out = list(names)
    if quadratic:
        out.extend(f"{z}^2" for z in names)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                out.append(f"{names[i]}*{names[j]}")
    return tuple(out)


def _covariate_values(values: dict, names, quadratic: bool) -> list[np.ndarray]:
    cols = [np.asarray(values[z], dtype=float) for z in names]
    out = list(cols)
    if quadratic:
        out.extend(c * c for c in cols)
        for i in range(len(cols)):
            for j in range(i + 1, len(cols)):
                out.append(cols[i] * cols[j])
    return out


def build_design(
    graph: GraphSpec,
    config: ModelConfig,
    covariates: dict,
    n: int | None = None,
):
    """(M, offset, column_names, interest_dim) for the declared design."""
    if n is None:
        if config.covariates:
            n = len(np.asarray(covariates[config.covariates[0]]))
        else:
            raise ValueError("n is required when the design has no covariates")
    J = graph.n_nodes
    node_index = {nm: j for j, nm in enumerate(graph.nodes)}
    layer_nodes: dict[str, list[int]] = {}
    for j, nm in enumerate(graph.nodes):
        layer_nodes.setdefault(graph.node_layer(nm), []).append(j)

    names: list[str] = []
    cols: list[np.ndarray] = []  # each (n, J)

    for layer in config.intercept_layers:
        if layer not in layer_nodes:
            raise AsterError(f"no nodes carry layer {layer!r}")
        col = np.zeros((n, J))
        col[:, layer_nodes[layer]] = 1.0
        names.append(f"{layer}_int")
        cols.append(col)

    for name, nodes in config.extra_columns:
        col = np.zeros((n, J))
        for nm in nodes:
            if nm not in node_index:
                raise AsterError(f"extra column {name!r}: unknown node {nm!r}")
            col[:, node_index[nm]] = 1.0
        names.append(name)
        cols.append(col)

    if config.covariate_nodes == "fitness":
        cov_nodes = [node_index[nm] for nm in graph.fitness_nodes]
    else:
        cov_nodes = [node_index[nm] for nm in config.covariate_nodes]
    cov_names = expand_covariates(config.covariates, config.quadratic)
    for name, vals in zip(cov_names, _covariate_values(covariates, config.covariates,
                                                       config.quadratic)):
        if len(vals) != n:
            raise AsterError(f"covariate {name!r} has length {len(vals)}, expected {n}")
        col = np.zeros((n, J))
        col[:, cov_nodes] = vals[:, None]
        names.append(name)
        cols.append(col)

    M = np.stack(cols, axis=2) if cols else np.zeros((n, J, 0))
    offset = np.full((n, J), config.offset)
    return M, offset, tuple(names), len(cov_names)


def profile_rows_builder(graph: GraphSpec, config: ModelConfig):
    """Closure mapping one covariate setting to (n_nodes, p) profile rows."""

    def build(setting: dict) -> np.ndarray:
        cov = {z: np.array([float(setting[z])]) for z in config.covariates}
        M, _, _, _ = build_design(graph, config, cov, n=1)
        return M[0]

    return build


# ---------------------------------------------------------------------------
# Long-format data files


def save_data(
    path: str | Path,
    graph: GraphSpec,
    Y: np.ndarray,
    covariates: dict,
    ids=None,
) -> None:
    Y = np.asarray(Y)
    n, J = Y.shape
    cov_names = list(covariates)
    if ids is None:
        ids = list(range(1, n + 1))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "node", "value", *cov_names])
        for i in range(n):
            for j, nm in enumerate(graph.nodes):
                w.writerow(
                    [ids[i], nm, int(Y[i, j])]
                    + [repr(float(covariates[z][i])) for z in cov_names]
                )


def load_data(path: str | Path, graph: GraphSpec):
    """Read a long-format file; returns (Y, covariates, ids).

    Rejects structurally impossible rows (a positive count under a zero
    predecessor) and incomplete individuals, naming the file row.
    """
    node_index = {nm: j for j, nm in enumerate(graph.nodes)}
    J = graph.n_nodes
    rows_by_id: dict = {}
    id_order: list = []
    cov_by_id: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != ["id", "node", "value"]:
            raise AsterError(f"{path}: header must start with id,node,value")
        cov_names = header[3:]
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            ident, node, value = row[0], row[1], row[2]
            if node not in node_index:
                raise AsterError(f"{path}:{lineno}: unknown node {node!r}")
            try:
                val = int(value)
            except ValueError as exc:
                raise AsterError(f"{path}:{lineno}: value {value!r} not an integer") from exc
            if val < 0:
                raise AsterError(f"{path}:{lineno}: negative count")
            if ident not in rows_by_id:
                rows_by_id[ident] = {}
                id_order.append(ident)
                cov_by_id[ident] = [float(v) for v in row[3:]]
            if node in rows_by_id[ident]:
                raise AsterError(f"{path}:{lineno}: duplicate node {node!r} for id {ident!r}")
            rows_by_id[ident][node] = (val, lineno)

    n = len(id_order)
    Y = np.zeros((n, J), dtype=np.int64)
    lines = np.zeros((n, J), dtype=np.int64)
    for i, ident in enumerate(id_order):
        got = rows_by_id[ident]
        for nm, j in node_index.items():
            if nm not in got:
                raise AsterError(f"{path}: id {ident!r} is missing node {nm!r}")
            Y[i, j], lines[i, j] = got[nm]

    ga = graph.compile()
    for j in range(J):
        pj = ga.pred[j]
        if pj < 0:
            continue
        bad = (Y[:, pj] == 0) & (Y[:, j] != 0)
        if bad.any():
            i = int(np.argmax(bad))
            raise AsterError(
                f"{path}:{lines[i, j]}: node {graph.nodes[j]!r} positive while "
                f"predecessor {graph.nodes[pj]!r} is zero for id {id_order[i]!r}"
            )

    covariates = {
        z: np.array([cov_by_id[ident][c] for ident in id_order])
        for c, z in enumerate(cov_names)
    }
    return Y, covariates, id_order


# ---------------------------------------------------------------------------
# Result files and metadata


def save_fit_result(outdir: str | Path, fit, column_names=()):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    p = len(fit.beta_hat)
    names = list(column_names) or [f"c{j}" for j in range(p)]
    with open(outdir / "coefficients.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "beta_hat", "tau_hat"])
        for j in range(p):
            w.writerow([names[j], repr(float(fit.beta_hat[j])), repr(float(fit.tau_hat[j]))])
    with open(outdir / "fisher.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in fit.Sigma_hat:
            w.writerow([repr(float(v)) for v in row])
    summary = {
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "converged": True,
        "n_coef": p,
        "interest_dim": fit.k,
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def config_hash(*objects) -> str:
    h = hashlib.sha256()
    for obj in objects:
        h.update(json.dumps(obj, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def write_meta(outdir: str | Path, *, seed=None, extra: dict | None = None,
               configs=()) -> None:
    meta = {
        "tool": "asterenv",
        "version": TOOL_VERSION,
        "seed": seed,
        "config_hash": config_hash(*configs) if configs else None,
    }
    if extra:
        meta.update(extra)
    Path(outdir, "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
