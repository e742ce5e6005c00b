"""Synthetic benchmark: random graph tasks with exactly computable motif
labels, a brute-force mutual-information oracle, and label-preservation /
diversity measurement for augmented sets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augmentor import AugmentedExample
from .errors import GenerationError, ValidationError
from .graphs import Graph, NodeTypeTable, _cosine, lift_graph, statistical_features
from .predictor import CLASSIFICATION, TaskSpec

TRIANGLE_COUNT = "triangle_count"
STAR_PRESENCE = "star_presence"


def synthetic_node_table() -> NodeTypeTable:
    """Default three-type vocabulary used by the synthetic tasks."""
    return NodeTypeTable(("a", "b", "c"), weights=[1.0, 2.0, 4.0], valences=[1.0, 2.0, 3.0])


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Random-graph task description: size range, edge density, motif rule."""

    n_graphs: int = 500
    n_lo: int = 4
    n_hi: int = 12
    density: float = 0.25
    motif: str = TRIANGLE_COUNT
    threshold: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_lo < 3 or self.n_hi < self.n_lo:
            raise ValidationError("need 3 <= n_lo <= n_hi")
        if not (0.0 < self.density < 1.0):
            raise ValidationError("density must lie in (0, 1)")
        if self.motif not in (TRIANGLE_COUNT, STAR_PRESENCE):
            raise ValidationError(f"unknown motif {self.motif!r}")


@dataclass(frozen=True)
class JointPmf:
    """Finite joint distribution over enumerated (graph, label) toy spaces."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        object.__setattr__(self, "probabilities", p)
        if np.any(p < 0):
            raise ValidationError("probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError("probabilities must sum to 1")


def oracle_label(g: Graph, motif: str, threshold: float) -> int:
    """Exact motif label: triangle_count uses trace(A^3)/6, star_presence the
    maximum degree. Returns 1 iff the count reaches the threshold."""
    a = g.adjacency.astype(np.float64)
    if motif == TRIANGLE_COUNT:
        count = np.trace(a @ a @ a) / 6.0
    elif motif == STAR_PRESENCE:
        count = a.sum(axis=1).max() if g.n_nodes else 0.0
    else:
        raise ValidationError(f"unknown motif {motif!r}")
    return int(count >= threshold)


def _random_graph(rng: np.random.Generator, cfg: SyntheticTaskConfig, n_types: int) -> Graph:
    n = int(rng.integers(cfg.n_lo, cfg.n_hi + 1))
    types = rng.integers(0, n_types, size=n)
    a = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n, 1)
    edges = rng.random(iu[0].size) < cfg.density
    a[iu] = edges.astype(np.int64)
    a += a.T
    return Graph(types, a)


def gen_synthetic_task(cfg: SyntheticTaskConfig) -> tuple[list[Graph], TaskSpec]:
    """Seed-deterministic labeled dataset with oracle labels, roughly class
    balanced: each class is capped at 60% via rejection; exhausting a 10x
    sampling budget raises GenerationError."""
    rng = np.random.default_rng(cfg.seed)
    table = synthetic_node_table()
    cap = math.ceil(0.6 * cfg.n_graphs)
    counts = {0: 0, 1: 0}
    graphs: list[Graph] = []
    budget = 10 * cfg.n_graphs
    draws = 0
    while len(graphs) < cfg.n_graphs:
        if draws >= budget:
            raise GenerationError("class-balance budget exhausted")
        draws += 1
        g = _random_graph(rng, cfg, table.n_types)
        label = oracle_label(g, cfg.motif, cfg.threshold)
        if counts[label] >= cap:
            continue
        counts[label] += 1
        graphs.append(
            Graph(g.node_types, g.adjacency, label=np.array([float(label)]),
                  label_mask=np.array([True]), id=f"synth-{len(graphs)}")
        )
    return graphs, TaskSpec(kind=CLASSIFICATION, n_tasks=1)


def brute_force_mi(pmf: JointPmf) -> float:
    """Mutual information in nats by direct enumeration of the joint table."""
    p = pmf.probabilities
    pg = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / (pg * py)[mask])).sum())


def label_preservation_rate(
    augmented: Sequence[AugmentedExample], motif: str, threshold: float
) -> float:
    """Fraction of augmented examples whose oracle label matches the stored y'."""
    if len(augmented) == 0:
        raise ValidationError("label_preservation_rate needs a non-empty list")
    hits = 0
    for ae in augmented:
        want = int(ae.label[0] > 0.5)
        hits += int(oracle_label(ae.graph, motif, threshold) == want)
    return hits / len(augmented)


def diversity_score(
    augmented: Sequence[AugmentedExample],
    sources: Sequence[Graph],
    table: NodeTypeTable,
    smooth_temp: float = 0.05,
) -> float:
    """Mean feature cosine between each augmented graph and its source
    (lower = more diverse)."""
    if len(augmented) != len(sources):
        raise ValidationError("augmented and source lists must be aligned")
    cosines = []
    for ae, src in zip(augmented, sources):
        fa = statistical_features(lift_graph(ae.graph, table.n_types), table, smooth_temp)
        fs = statistical_features(lift_graph(src, table.n_types), table, smooth_temp)
        cosines.append(_cosine(fa.values, fs.values))
    return float(np.mean(cosines))
