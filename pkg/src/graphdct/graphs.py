"""Graph data model, JSONL ingestion, batching, statistical features and similarity.

Graphs are undirected, node-typed, optionally labeled. The on-disk format is
JSON Lines: one object per graph with keys "nodes" (list of type indices),
"edges" (list of [u, v] pairs), optional "label" (numbers or nulls for masked
entries) and optional "id". Node types index into a :class:`NodeTypeTable`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    CapacityError,
    DegenerateFeatureError,
    DomainError,
    EmptyGraphError,
    ParseError,
    ValidationError,
)

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class NodeTypeTable:
    """Vocabulary of node types with per-type weight and valence scalars.

    Weights are strictly positive (e.g. atomic masses in unified mass units);
    valences are reference values carried along for feature extraction.
    """

    names: tuple[str, ...]
    weights: np.ndarray
    valences: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "valences", np.asarray(self.valences, dtype=np.float64))
        if len(set(self.names)) != len(self.names):
            raise ValidationError("node type names must be unique")
        if len(self.names) != self.weights.shape[0] or len(self.names) != self.valences.shape[0]:
            raise ValidationError("names, weights and valences must have equal length")
        if not np.all(self.weights > 0):
            raise ValidationError("node type weights must be > 0")

    @property
    def n_types(self) -> int:
        return len(self.names)

    def to_json(self) -> str:
        return json.dumps(
            {
                "names": list(self.names),
                "weights": self.weights.tolist(),
                "valences": self.valences.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "NodeTypeTable":
        try:
            obj = json.loads(text)
            return cls(tuple(obj["names"]), obj["weights"], obj["valences"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"invalid node type table: {exc}") from exc


@dataclass(frozen=True)
class Graph:
    """Discrete attributed graph.

    ``adjacency`` is a symmetric 0/1 matrix with zero diagonal. ``label`` is an
    optional multi-task target with a per-entry validity mask (False = missing).
    """

    node_types: np.ndarray
    adjacency: np.ndarray
    label: np.ndarray | None = None
    label_mask: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "node_types", np.asarray(self.node_types, dtype=np.int64))
        object.__setattr__(self, "adjacency", np.asarray(self.adjacency, dtype=np.int64))
        if self.label is not None:
            object.__setattr__(self, "label", np.asarray(self.label, dtype=np.float64))
            mask = self.label_mask if self.label_mask is not None else np.ones(self.label.shape, dtype=bool)
            object.__setattr__(self, "label_mask", np.asarray(mask, dtype=bool))
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != self.node_types.shape[0]:
            raise ValidationError("adjacency must be n x n matching node_types")
        if not np.array_equal(a, a.T):
            raise ValidationError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        if not np.isin(a, (0, 1)).all():
            raise ValidationError("adjacency entries must be 0 or 1")
        if np.any(self.node_types < 0):
            raise ValidationError("node type indices must be non-negative")
        if self.label is not None and self.label.shape != self.label_mask.shape:
            raise ValidationError("label and label mask must have equal length")

    @property
    def n_nodes(self) -> int:
        return int(self.node_types.shape[0])

    def check_types(self, table: NodeTypeTable) -> None:
        if np.any(self.node_types >= table.n_types):
            raise ValidationError("node type index out of table bounds")


@dataclass
class ContinuousGraph:
    """Relaxed diffusion state: real node-type matrix and real symmetric adjacency.

    ``x`` is (n_max, F), ``a`` is (n_max, n_max) symmetric with zero diagonal,
    ``node_mask`` marks real nodes; padded entries are exactly zero.
    """

    x: np.ndarray
    a: np.ndarray
    node_mask: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.node_mask = np.asarray(self.node_mask, dtype=bool)

    @property
    def n_real(self) -> int:
        return int(self.node_mask.sum())

    def copy(self) -> "ContinuousGraph":
        return ContinuousGraph(self.x.copy(), self.a.copy(), self.node_mask.copy(), self.time)


@dataclass(frozen=True)
class FeatureVector:
    """Fixed-length statistical feature vector of a graph.

    Layout: [degree sum | type distribution (F) | weight max, min, mean |
    valence max, min, mean].
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def feature_length(table: NodeTypeTable) -> int:
    return 1 + table.n_types + 3 + 3


# ---------------------------------------------------------------------------
# Parsing / serialization
# ---------------------------------------------------------------------------

def parse_graph_record(line: str, table: NodeTypeTable) -> Graph:
    """Parse one JSONL graph record.

    Null label entries become masked-out entries; edges are symmetrized.
    Raises ParseError for malformed JSON and ValidationError for self-loops,
    out-of-range endpoints or unknown node types.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed graph record: {exc}") from exc
    if not isinstance(obj, dict) or "nodes" not in obj or "edges" not in obj:
        raise ParseError("graph record must be an object with 'nodes' and 'edges'")

    nodes = np.asarray(obj["nodes"], dtype=np.int64)
    n = nodes.shape[0]
    if np.any(nodes < 0) or np.any(nodes >= table.n_types):
        raise ValidationError("unknown node type index")
    a = np.zeros((n, n), dtype=np.int64)
    for edge in obj["edges"]:
        u, v = int(edge[0]), int(edge[1])
        if u == v:
            raise ValidationError(f"self-loop on node {u} rejected")
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"edge endpoint ({u}, {v}) out of range")
        a[u, v] = 1
        a[v, u] = 1

    label = mask = None
    if obj.get("label") is not None:
        raw = obj["label"]
        label = np.array([0.0 if v is None else float(v) for v in raw], dtype=np.float64)
        mask = np.array([v is not None for v in raw], dtype=bool)
    return Graph(nodes, a, label, mask, id=str(obj.get("id", "")))


def serialize_graph(g: Graph) -> str:
    """Inverse of parse_graph_record: one-line JSON with sorted upper-tri edges."""
    iu, ju = np.nonzero(np.triu(g.adjacency, 1))
    obj: dict = {
        "nodes": g.node_types.tolist(),
        "edges": [[int(u), int(v)] for u, v in zip(iu, ju)],
    }
    if g.label is not None:
        obj["label"] = [float(v) if m else None for v, m in zip(g.label, g.label_mask)]
    obj["id"] = g.id
    return json.dumps(obj)


def load_graphs_jsonl(path: str, table: NodeTypeTable) -> list[Graph]:
    graphs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                graphs.append(parse_graph_record(line, table))
    return graphs


def save_graphs_jsonl(path: str, graphs: Iterable[Graph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(serialize_graph(g) + "\n")


# ---------------------------------------------------------------------------
# Batching / discretization
# ---------------------------------------------------------------------------

def batch_graphs(graphs: Sequence[Graph], n_max: int, n_types: int) -> list[ContinuousGraph]:
    """Lift discrete graphs to padded continuous states (one-hot x, 0/1 a, time 0)."""
    out = []
    for g in graphs:
        n = g.n_nodes
        if n > n_max:
            raise CapacityError(f"graph with {n} nodes exceeds n_max={n_max}")
        if np.any(g.node_types >= n_types):
            raise ValidationError("node type index out of range for one-hot width")
        x = np.zeros((n_max, n_types), dtype=np.float64)
        x[np.arange(n), g.node_types] = 1.0
        a = np.zeros((n_max, n_max), dtype=np.float64)
        a[:n, :n] = g.adjacency
        mask = np.zeros(n_max, dtype=bool)
        mask[:n] = True
        out.append(ContinuousGraph(x, a, mask, time=0.0))
    return out


def lift_graph(g: Graph, n_types: int, n_max: int | None = None) -> ContinuousGraph:
    """One-graph convenience wrapper around batch_graphs."""
    return batch_graphs([g], g.n_nodes if n_max is None else n_max, n_types)[0]


def discretize(g: ContinuousGraph, edge_threshold: float, table: NodeTypeTable) -> Graph:
    """Quantize a continuous state back to a discrete Graph.

    Node types are per-row argmax (ties broken by lowest index); an edge exists
    iff the symmetrized adjacency entry exceeds ``edge_threshold``. Idempotent
    on states that are already one-hot / 0-1.
    """
    if not (0.0 < edge_threshold < 1.0):
        raise DomainError("edge_threshold must lie in (0, 1)")
    idx = np.flatnonzero(g.node_mask)
    x = g.x[idx]
    if x.shape[1] != table.n_types:
        raise ValidationError("state width does not match node type table")
    node_types = np.argmax(x, axis=1)
    a_sym = 0.5 * (g.a + g.a.T)
    adj = (a_sym[np.ix_(idx, idx)] > edge_threshold).astype(np.int64)
    np.fill_diagonal(adj, 0)
    return Graph(node_types, adj)


# ---------------------------------------------------------------------------
# Statistical features
# ---------------------------------------------------------------------------

def _soft_extrema(values: np.ndarray, temp: float):
    """Softmax-weighted max and min of a vector, differentiable in the values.

    Converges to the hard extrema as temp -> 0 and is exact under ties.
    Returns (smax, smin, weights_max, weights_min); the weight vectors are the
    softmax factors reused by the backward pass.
    """
    z = values / temp
    wmax = np.exp(z - z.max())
    wmax /= wmax.sum()
    wmin = np.exp(-(z - z.min()))
    wmin /= wmin.sum()
    return float(wmax @ values), float(wmin @ values), wmax, wmin


def statistical_features(
    g: ContinuousGraph, table: NodeTypeTable, smooth_temp: float = 0.05
) -> FeatureVector:
    """Statistical feature vector of a (possibly relaxed) graph.

    Concatenates the total degree, the node-type distribution, smooth
    max/min/mean of per-node weight (x @ table.weights) and the same three
    statistics of the per-node valence proxy (adjacency row sums). The map is
    differentiable in (x, a); on one-hot/0-1 inputs the degree and type blocks
    take their exact combinatorial values.
    """
    vec, _ = _features_with_vjp(g, table, smooth_temp)
    return vec


def _features_with_vjp(
    g: ContinuousGraph, table: NodeTypeTable, smooth_temp: float
) -> tuple[FeatureVector, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    """statistical_features plus a vector-Jacobian product callback.

    The callback maps an upstream gradient over the feature vector to ambient
    gradients (d/dx, d/da); symmetry projection of the adjacency gradient is
    left to the caller.
    """
    mask = g.node_mask
    idx = np.flatnonzero(mask)
    nm = idx.size
    if nm == 0:
        raise EmptyGraphError("statistical features need at least one real node")
    F = table.n_types
    if g.x.shape[1] != F:
        raise ValidationError("state width does not match node type table")

    x = g.x[idx]                       # (nm, F)
    a_blk = g.a[np.ix_(idx, idx)]      # (nm, nm)

    deg_sum = float(a_blk.sum())

    row_sums = x.sum(axis=1) + _NORM_EPS
    rows = x / row_sums[:, None]
    type_dist = rows.mean(axis=0)

    w = x @ table.weights
    w_max, w_min, w_wmax, w_wmin = _soft_extrema(w, smooth_temp)
    w_mean = float(w.mean())

    val = a_blk.sum(axis=1)
    v_max, v_min, v_wmax, v_wmin = _soft_extrema(val, smooth_temp)
    v_mean = float(val.mean())

    values = np.concatenate(
        [[deg_sum], type_dist, [w_max, w_min, w_mean], [v_max, v_min, v_mean]]
    )

    def vjp(upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        u = np.asarray(upstream, dtype=np.float64)
        gx = np.zeros_like(g.x)
        ga = np.zeros_like(g.a)
        gx_blk = np.zeros_like(x)
        ga_blk = np.zeros_like(a_blk)

        # degree sum: d/da_ij = 1 on the masked block
        ga_blk += u[0]

        # type distribution: d/dx_ig = (u_g - u . rows_i) / (nm * row_sums_i)
        u_td = u[1 : 1 + F]
        gx_blk += (u_td[None, :] - (rows @ u_td)[:, None]) / (nm * row_sums[:, None])

        # weight block: chain through per-node weight w = x @ weights
        gw = u[1 + F] * w_wmax * (1.0 + (w - w_max) / smooth_temp)
        gw += u[2 + F] * w_wmin * (1.0 - (w - w_min) / smooth_temp)
        gw += u[3 + F] / nm
        gx_blk += gw[:, None] * table.weights[None, :]

        # valence block: chain through row sums of the masked adjacency
        gv = u[4 + F] * v_wmax * (1.0 + (val - v_max) / smooth_temp)
        gv += u[5 + F] * v_wmin * (1.0 - (val - v_min) / smooth_temp)
        gv += u[6 + F] / nm
        ga_blk += gv[:, None]

        gx[idx] = gx_blk
        ga[np.ix_(idx, idx)] = ga_blk
        return gx, ga

    return FeatureVector(values), vjp


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def _cosine(v: np.ndarray, u: np.ndarray) -> float:
    nv, nu = np.linalg.norm(v), np.linalg.norm(u)
    if nv < _NORM_EPS or nu < _NORM_EPS:
        raise DegenerateFeatureError("zero-norm feature vector in cosine similarity")
    return float(v @ u / (nv * nu))


def _cosine_with_grad(v: np.ndarray, u: np.ndarray) -> tuple[float, np.ndarray]:
    """Cosine similarity and its gradient w.r.t. the first argument."""
    nv, nu = np.linalg.norm(v), np.linalg.norm(u)
    if nv < _NORM_EPS or nu < _NORM_EPS:
        raise DegenerateFeatureError("zero-norm feature vector in cosine similarity")
    c = float(v @ u / (nv * nu))
    grad = u / (nv * nu) - c * v / (nv * nv)
    return c, grad


def similarity_softmax(g_aug: FeatureVector, candidates: Sequence[FeatureVector]) -> np.ndarray:
    """Softmax over cosine similarities between g_aug and each candidate."""
    if len(candidates) == 0:
        raise ValidationError("candidate list must be non-empty")
    cos = np.array([_cosine(g_aug.values, c.values) for c in candidates])
    e = np.exp(cos - cos.max())
    return e / e.sum()
