"""Life-history graphs: structure, parameter recursions, simulation.

A graph has one node per response component and one arrow per node from
its predecessor (or from the constant root, whose value is 1 for every
individual).  Three parameter scales appear:

* ``theta``: conditional canonical, one per arrow; the scale on which
  the family cumulants act.
* ``phi``: unconditional canonical (the linear-predictor scale of the
  affine submodel), linked to theta by
  ``phi_j = theta_j - sum_{k: pred(k)=j} c_k(theta_k)``.
* ``mu``: unconditional means, ``mu_j = mu_pred(j) * c'_j(theta_j)``
  with the root mean fixed at 1.

Arrays are laid out ``(n_individuals, n_nodes)`` in declared node order;
the recursions accept any leading batch shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphError, OverflowAtNode
from .families import (
    Family,
    cumulant_array,
    cumulant_d1_array,
    cumulant_d2_array,
    sample_sum_array,
)

__all__ = [
    "GraphSpec",
    "GraphArrays",
    "validate",
    "theta_to_phi",
    "phi_to_theta",
    "compute_mu",
    "joint_cumulant",
    "simulate",
    "covariance_blocks",
    "load_graph",
    "save_graph",
    "survival_reproduction_graph",
    "survival_fecundity_chain",
]

FAMILY_CODES = {
    Family.BERNOULLI: 0,
    Family.POISSON: 1,
    Family.ZERO_TRUNCATED_POISSON: 2,
}


@dataclass(frozen=True)
class GraphSpec:
    """Declared structure of a life-history graph.

    ``predecessor`` maps a node id to a tuple of parent ids; a valid
    graph has exactly one parent per node or the empty tuple for arrows
    out of the constant root.  Multi-parent tuples are representable so
    that ``validate`` can reject them with a named assumption.
    """

    nodes: tuple[str, ...]
    predecessor: Mapping[str, tuple[str, ...]]
    family: Mapping[str, Family]
    fitness_nodes: tuple[str, ...]
    layer: Mapping[str, str] = field(default_factory=dict)

    @staticmethod
    def build(
        nodes: Sequence[str],
        predecessor: Mapping[str, str | None],
        family: Mapping[str, Family | str],
        fitness_nodes: Iterable[str],
        layer: Mapping[str, str] | None = None,
    ) -> "GraphSpec":
        """Convenience constructor from single-parent maps."""
        pred = {
            n: (() if predecessor.get(n) is None else (predecessor[n],))
            for n in nodes
        }
        fam = {
            n: (f if isinstance(f, Family) else Family(f))
            for n, f in family.items()
        }
        return GraphSpec(
            nodes=tuple(nodes),
            predecessor=pred,
            family=fam,
            fitness_nodes=tuple(fitness_nodes),
            layer=dict(layer or {}),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_layer(self, node: str) -> str:
        return self.layer.get(node, node)

    def compile(self) -> "GraphArrays":
        violations = validate(self)
        if violations:
            raise GraphError("; ".join(violations))
        return GraphArrays.from_spec(self)


def validate(spec: GraphSpec) -> list[str]:
    """Structural checks; an empty list means the graph is usable.

    Violations name the offending node and the assumption broken:
    acyclicity (A1), single predecessor per singleton dependence group
    (A3), and a registered family on every arrow.
    """
    out: list[str] = []
    seen = set()
    for n in spec.nodes:
        if n in seen:
            out.append(f"node {n!r}: duplicate id")
        seen.add(n)

    for n in spec.nodes:
        preds = tuple(spec.predecessor.get(n, ()))
        if len(preds) > 1:
            out.append(
                f"node {n!r}: {len(preds)} predecessors, dependence groups "
                "are single nodes with at most one predecessor (A3)"
            )
        for p in preds:
            if p == n:
                out.append(f"node {n!r}: self-loop, graph of arrows must be acyclic (A1)")
            elif p not in seen and p not in spec.nodes:
                out.append(f"node {n!r}: unknown predecessor {p!r}")
        if n not in spec.family:
            out.append(f"node {n!r}: no family registered (A6)")

    # Cycle detection on the single-parent projection.
    index = {n: i for i, n in enumerate(spec.nodes)}
    state = {}

    def walk(n: str) -> bool:
        # True if a cycle is reachable following predecessors from n.
        chain = []
        while True:
            mark = state.get(n)
            if mark == "done":
                break
            if mark == "active":
                return True
            state[n] = "active"
            chain.append(n)
            preds = [p for p in spec.predecessor.get(n, ()) if p in index and p != n]
            if not preds:
                break
            n = preds[0]
        for c in chain:
            state[c] = "done"
        return False

    for n in spec.nodes:
        if walk(n):
            out.append(f"node {n!r}: predecessor chain contains a cycle (A1)")
            break

    if not spec.fitness_nodes:
        out.append("fitness_nodes: must be nonempty")
    for n in spec.fitness_nodes:
        if n not in index:
            out.append(f"fitness node {n!r}: not a graph node")
    return out


@dataclass(frozen=True)
class GraphArrays:
    """Array form of a validated graph, shared by the numeric routines."""

    spec: GraphSpec
    pred: np.ndarray  # (J,) int64, -1 for arrows out of the root
    topo: np.ndarray  # (J,) int64, parents before children
    rev_topo: np.ndarray  # (J,) int64, children before parents
    fam: np.ndarray  # (J,) int64 family codes
    child_ptr: np.ndarray  # (J+1,) int64 CSR offsets into child_idx
    child_idx: np.ndarray  # int64 children in node order
    fitness_idx: np.ndarray  # (F,) int64

    @staticmethod
    def from_spec(spec: GraphSpec) -> "GraphArrays":
        index = {n: i for i, n in enumerate(spec.nodes)}
        J = len(spec.nodes)
        pred = np.full(J, -1, dtype=np.int64)
        for n in spec.nodes:
            preds = tuple(spec.predecessor.get(n, ()))
            if preds:
                pred[index[n]] = index[preds[0]]
        fam = np.array([FAMILY_CODES[spec.family[n]] for n in spec.nodes], dtype=np.int64)

        children: list[list[int]] = [[] for _ in range(J)]
        for j in range(J):
            if pred[j] >= 0:
                children[pred[j]].append(j)
        child_ptr = np.zeros(J + 1, dtype=np.int64)
        flat: list[int] = []
        for j in range(J):
            child_ptr[j + 1] = child_ptr[j] + len(children[j])
            flat.extend(children[j])
        child_idx = np.array(flat, dtype=np.int64)

        # Kahn ordering over the parent arrows.
        topo: list[int] = []
        ready = [j for j in range(J) if pred[j] < 0]
        remaining = {j: 1 for j in range(J) if pred[j] >= 0}
        while ready:
            j = ready.pop(0)
            topo.append(j)
            for c in children[j]:
                remaining.pop(c, None)
                ready.append(c)
        if len(topo) != J:
            raise GraphError("graph has a cycle")

        fit = np.array([index[n] for n in spec.fitness_nodes], dtype=np.int64)
        topo_arr = np.array(topo, dtype=np.int64)
        return GraphArrays(
            spec=spec,
            pred=pred,
            topo=topo_arr,
            rev_topo=topo_arr[::-1].copy(),
            fam=fam,
            child_ptr=child_ptr,
            child_idx=child_idx,
            fitness_idx=fit,
        )

    @property
    def n_nodes(self) -> int:
        return len(self.pred)

    def family_of(self, j: int) -> Family:
        return self.spec.family[self.spec.nodes[j]]


def _node_cumulant(ga: GraphArrays, j: int, theta_j: np.ndarray) -> np.ndarray:
    return cumulant_array(ga.family_of(j), theta_j)


def _check_finite(ga: GraphArrays, j: int, values: np.ndarray) -> None:
    if not np.isfinite(values).all():
        raise OverflowAtNode(ga.spec.nodes[j])


def phi_to_theta(ga: GraphArrays, phi: np.ndarray) -> np.ndarray:
    """Invert the canonical-scale change, leaves upward."""
    phi = np.asarray(phi, dtype=float)
    theta = phi.copy()
    cvals = np.empty_like(theta)
    for j in ga.topo[::-1]:
        lo, hi = ga.child_ptr[j], ga.child_ptr[j + 1]
        for c in ga.child_idx[lo:hi]:
            theta[..., j] += cvals[..., c]
        cvals[..., j] = _node_cumulant(ga, j, theta[..., j])
        _check_finite(ga, j, cvals[..., j])
    return theta


def theta_to_phi(ga: GraphArrays, theta: np.ndarray) -> np.ndarray:
    """phi_j = theta_j - sum of child-arrow cumulants at theta."""
    theta = np.asarray(theta, dtype=float)
    phi = theta.copy()
    for j in range(ga.n_nodes):
        lo, hi = ga.child_ptr[j], ga.child_ptr[j + 1]
        for c in ga.child_idx[lo:hi]:
            cval = _node_cumulant(ga, c, theta[..., c])
            _check_finite(ga, c, cval)
            phi[..., j] -= cval
    return phi


def compute_mu(ga: GraphArrays, theta: np.ndarray) -> np.ndarray:
    """Unconditional means by the product recursion (root mean is 1)."""
    theta = np.asarray(theta, dtype=float)
    mu = np.empty_like(theta)
    for j in ga.topo:
        xi = cumulant_d1_array(ga.family_of(j), theta[..., j])
        p = ga.pred[j]
        mu[..., j] = xi if p < 0 else mu[..., p] * xi
    return mu


def joint_cumulant(ga: GraphArrays, phi: np.ndarray) -> np.ndarray:
    """Joint cumulant of the unconditional canonical scale, per row."""
    theta = phi_to_theta(ga, phi)
    out = np.zeros(theta.shape[:-1])
    for j in range(ga.n_nodes):
        if ga.pred[j] < 0:
            out += _node_cumulant(ga, j, theta[..., j])
    return out


def conditional_moments(
    ga: GraphArrays, theta: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-node (xi, v, mu, d): arrow mean/variance, node mean, and the
    innovation variance d_j = mu_pred(j) * v_j."""
    theta = np.asarray(theta, dtype=float)
    xi = np.empty_like(theta)
    v = np.empty_like(theta)
    mu = np.empty_like(theta)
    d = np.empty_like(theta)
    for j in ga.topo:
        fam = ga.family_of(j)
        xi[..., j] = cumulant_d1_array(fam, theta[..., j])
        v[..., j] = cumulant_d2_array(fam, theta[..., j])
        p = ga.pred[j]
        mup = 1.0 if p < 0 else mu[..., p]
        mu[..., j] = mup * xi[..., j]
        d[..., j] = mup * v[..., j]
    return xi, v, mu, d


def covariance_blocks(ga: GraphArrays, theta: np.ndarray) -> np.ndarray:
    """Exact per-individual covariance of the response, shape (..., J, J).

    Uses the innovation decomposition Y = A e + const with uncorrelated
    innovations e_j of variance d_j and A the ancestor path-product
    matrix, so Var(Y) = A diag(d) A^T.
    """
    theta = np.asarray(theta, dtype=float)
    xi, _, _, d = conditional_moments(ga, theta)
    J = ga.n_nodes
    shape = theta.shape[:-1]
    A = np.zeros(shape + (J, J))
    for j in ga.topo:
        p = ga.pred[j]
        if p >= 0:
            A[..., j, :] = xi[..., j, None] * A[..., p, :]
        A[..., j, j] = 1.0
    return np.einsum("...ja,...a,...ka->...jk", A, d, A)


def simulate(ga: GraphArrays, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw a response matrix, topological order, root value 1."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2:
        raise ValueError("theta must be (n_individuals, n_nodes)")
    n = theta.shape[0]
    Y = np.zeros((n, ga.n_nodes), dtype=np.int64)
    for j in ga.topo:
        p = ga.pred[j]
        n_pred = np.ones(n, dtype=np.int64) if p < 0 else Y[:, p]
        Y[:, j] = sample_sum_array(ga.family_of(j), theta[:, j], n_pred, rng)
    return Y


# ---------------------------------------------------------------------------
# Config files


def graph_to_config(spec: GraphSpec) -> dict:
    nodes = []
    for n in spec.nodes:
        preds = tuple(spec.predecessor.get(n, ()))
        entry = {
            "id": n,
            "predecessor": preds[0] if len(preds) == 1 else (None if not preds else list(preds)),
            "family": spec.family[n].value,
        }
        if n in spec.layer:
            entry["layer"] = spec.layer[n]
        nodes.append(entry)
    return {"nodes": nodes, "fitness_nodes": list(spec.fitness_nodes)}


def graph_from_config(cfg: dict) -> GraphSpec:
    nodes = []
    pred: dict[str, tuple[str, ...]] = {}
    fam: dict[str, Family] = {}
    layer: dict[str, str] = {}
    for entry in cfg["nodes"]:
        n = entry["id"]
        nodes.append(n)
        p = entry.get("predecessor")
        if p is None:
            pred[n] = ()
        elif isinstance(p, str):
            pred[n] = (p,)
        else:
            pred[n] = tuple(p)
        fam[n] = Family(entry["family"])
        if "layer" in entry:
            layer[n] = entry["layer"]
    return GraphSpec(
        nodes=tuple(nodes),
        predecessor=pred,
        family=fam,
        fitness_nodes=tuple(cfg.get("fitness_nodes", ())),
        layer=layer,
    )


def save_graph(spec: GraphSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_config(spec), indent=2) + "\n")


def load_graph(path: str | Path) -> GraphSpec:
    return graph_from_config(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Stock graphs


def survival_reproduction_graph(stages: int = 10) -> GraphSpec:
    """Three-layer graph: a survival chain, a reproduced-or-not indicator
    per stage, and a zero-truncated offspring count per stage."""
    nodes: list[str] = []
    pred: dict[str, str | None] = {}
    fam: dict[str, Family] = {}
    layer: dict[str, str] = {}
    prev = None
    for t in range(1, stages + 1):
        s, r, o = f"surv{t}", f"repr{t}", f"off{t}"
        nodes.append(s)
        pred[s] = prev
        fam[s] = Family.BERNOULLI
        layer[s] = "surv"
        prev = s
        nodes.append(r)
        pred[r] = s
        fam[r] = Family.BERNOULLI
        layer[r] = "repr"
        nodes.append(o)
        pred[o] = r
        fam[o] = Family.ZERO_TRUNCATED_POISSON
        layer[o] = "off"
    fitness = tuple(f"off{t}" for t in range(1, stages + 1))
    return GraphSpec.build(nodes, pred, fam, fitness, layer)


def survival_fecundity_chain() -> GraphSpec:
    """Two-node chain: survival, then a zero-truncated offspring count."""
    return GraphSpec.build(
        nodes=["surv", "count"],
        predecessor={"surv": None, "count": "surv"},
        family={"surv": Family.BERNOULLI, "count": Family.ZERO_TRUNCATED_POISSON},
        fitness_nodes=["count"],
        layer={"surv": "surv", "count": "count"},
    )
