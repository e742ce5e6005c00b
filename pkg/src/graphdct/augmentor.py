"""Guided reverse diffusion: task-specific labeled graph augmentation.

Given a labeled source graph, the augmentor perturbs it a few steps forward,
then reverses with the learned score plus a guidance term: the gradient of
loss = contrastive_bound(new, source) - log p(y | predictor(new)), evaluated
at a denoised surrogate of the current state (double-loop sampling) and
rescaled so its norm matches the network score (score alignment). The output
keeps the source label exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffusion import SdeConfig, pc_reverse_step, perturb, _grid_index
from .errors import InsufficientNegativesError, ValidationError
from .graphs import (
    ContinuousGraph,
    FeatureVector,
    Graph,
    NodeTypeTable,
    _cosine,
    _cosine_with_grad,
    _features_with_vjp,
    discretize,
    lift_graph,
    statistical_features,
)
from .predictor import CLASSIFICATION, PredictorParams, TaskSpec, label_loglik, label_loglik_grad


@dataclass
class AugmentConfig:
    """Augmentation knobs: perturbation depth D, contrastive sample count M,
    inner-loop cap, regression negative gap, feature temperature, and switches
    for the two guidance objectives (both on by default)."""

    d_steps: int = 5
    m_negatives: int = 5
    inner_grid_cap: int | None = None
    regression_delta: float | None = None
    smooth_temp: float = 0.05
    use_diversity: bool = True
    use_label: bool = True

    def __post_init__(self):
        if self.d_steps < 0:
            raise ValidationError("d_steps must be >= 0")
        if self.m_negatives < 2:
            raise ValidationError("m_negatives must be >= 2")
        if self.inner_grid_cap is not None and self.inner_grid_cap < 1:
            raise ValidationError("inner_grid_cap must be positive")
        if self.regression_delta is not None and not self.regression_delta > 0:
            raise ValidationError("regression_delta must be > 0")

    def effective_inner_cap(self) -> int:
        return self.inner_grid_cap if self.inner_grid_cap is not None else max(self.d_steps, 1)


@dataclass
class AugmentedExample:
    """Generated graph with the source's label and mask, plus diagnostics
    (final contrastive bound, final label log-likelihood, feature cosine to
    the source)."""

    graph: Graph
    label: np.ndarray
    label_mask: np.ndarray
    source_id: str
    diagnostics: dict = field(default_factory=dict)


def pick_negatives(
    pool: Sequence[Graph],
    y: np.ndarray,
    y_mask: np.ndarray,
    m: int,
    spec: TaskSpec,
    rng: np.random.Generator,
    regression_delta: float | None = None,
) -> list[Graph]:
    """Uniformly sample m-1 pool graphs whose labels differ from y.

    Classification: some shared valid task has a different binary label.
    Regression: some shared valid task differs by more than regression_delta.
    """
    y = np.asarray(y, dtype=np.float64)
    y_mask = np.asarray(y_mask, dtype=bool)
    if spec.kind != CLASSIFICATION and regression_delta is None:
        raise ValidationError("regression negatives need a regression_delta")
    eligible = []
    for i, g in enumerate(pool):
        if g.label is None:
            continue
        shared = g.label_mask & y_mask
        if not shared.any():
            continue
        if spec.kind == CLASSIFICATION:
            differs = (g.label[shared] > 0.5) != (y[shared] > 0.5)
        else:
            differs = np.abs(g.label[shared] - y[shared]) > regression_delta
        if differs.any():
            eligible.append(i)
    if len(eligible) < m - 1:
        raise InsufficientNegativesError(
            f"need {m - 1} negatives, pool has {len(eligible)} eligible graphs"
        )
    chosen = rng.choice(len(eligible), size=m - 1, replace=False)
    return [pool[eligible[int(i)]] for i in chosen]


def _candidate_features(
    g_pos: Graph, negatives: Sequence[Graph], table: NodeTypeTable, smooth_temp: float
) -> list[FeatureVector]:
    feats = []
    for g in [g_pos, *negatives]:
        feats.append(statistical_features(lift_graph(g, table.n_types), table, smooth_temp))
    return feats


def _bound_from_features(
    aug: FeatureVector, cand: Sequence[FeatureVector], want_grad: bool
):
    """Leave-one-out contrastive bound log(p_pos / sum_neg p_j) from cosines.

    Equals cos_pos - logsumexp(cos_negs); optionally returns d(bound)/d(aug).
    """
    cos = []
    grads = []
    for c in cand:
        if want_grad:
            ci, gi = _cosine_with_grad(aug.values, c.values)
            grads.append(gi)
        else:
            ci = _cosine(aug.values, c.values)
        cos.append(ci)
    cos = np.asarray(cos)
    neg = cos[1:]
    shift = neg.max()
    lse = shift + math.log(np.exp(neg - shift).sum())
    bound = float(cos[0] - lse)
    if not want_grad:
        return bound, None
    w = np.exp(neg - shift)
    w /= w.sum()
    gfeat = grads[0] - sum(wj * gj for wj, gj in zip(w, grads[1:]))
    return bound, gfeat


def info_nce_bound(
    g_aug: ContinuousGraph,
    g_pos: Graph,
    negatives: Sequence[Graph],
    table: NodeTypeTable,
    smooth_temp: float = 0.05,
) -> float:
    """Leave-one-out contrastive estimate of the dependence between the
    augmented state and its source, from softmaxed feature cosines."""
    if len(negatives) == 0:
        raise ValidationError("info_nce_bound needs at least one negative")
    aug = statistical_features(g_aug, table, smooth_temp)
    cand = _candidate_features(g_pos, negatives, table, smooth_temp)
    bound, _ = _bound_from_features(aug, cand, want_grad=False)
    return bound


def alignment_alpha(score_norm: float, grad_norm: float) -> float:
    """Score-alignment scale ||s|| / ||grad||; 0 when the gradient vanishes."""
    if grad_norm == 0.0:
        return 0.0
    return score_norm / grad_norm


def guidance_loss(
    g_aug: ContinuousGraph,
    g_src: Graph,
    y: np.ndarray,
    y_mask: np.ndarray,
    negatives: Sequence[Graph],
    predictor: PredictorParams,
    spec: TaskSpec,
    table: NodeTypeTable,
    smooth_temp: float = 0.05,
    include_bound: bool = True,
    include_loglik: bool = True,
):
    """Guidance objective bound - log p(y | f(g_aug)) and its input gradients.

    The adjacency gradient is projected to the symmetric zero-diagonal
    subspace and padding entries are zeroed. The two terms can be toggled for
    ablations; at least one must be active.
    """
    if not (include_bound or include_loglik):
        raise ValidationError("guidance needs at least one active objective")
    gx = np.zeros_like(g_aug.x)
    ga = np.zeros_like(g_aug.a)
    value = 0.0
    bound_val = float("nan")
    ll_val = float("nan")

    if include_bound:
        if len(negatives) == 0:
            raise ValidationError("guidance bound term needs negatives")
        aug_feat, vjp = _features_with_vjp(g_aug, table, smooth_temp)
        cand = _candidate_features(g_src, negatives, table, smooth_temp)
        bound_val, gfeat = _bound_from_features(aug_feat, cand, want_grad=True)
        fx, fa = vjp(gfeat)
        gx += fx
        ga += fa
        value += bound_val

    if include_loglik:
        ll_val, lx, la = label_loglik_grad(g_aug, y, y_mask, predictor, spec)
        gx -= lx
        ga -= la
        value -= ll_val

    ga = 0.5 * (ga + ga.T)
    np.fill_diagonal(ga, 0.0)
    mf = g_aug.node_mask.astype(np.float64)
    gx *= mf[:, None]
    ga *= np.outer(mf, mf)
    return value, gx, ga, {"bound": bound_val, "loglik": ll_val}


def denoise_estimate(
    state: ContinuousGraph,
    t: float,
    nets,
    cfg: SdeConfig,
    aug_cfg: AugmentConfig,
    rng: np.random.Generator,
) -> ContinuousGraph:
    """Denoised surrogate: unguided reverse chain from t down to the grid floor,
    capped at inner_grid_cap steps. At the floor the state is returned as is."""
    k = _grid_index(t, cfg)
    steps = min(k - 1, aug_cfg.effective_inner_cap())
    est = state.copy()
    for j in range(steps):
        est = pc_reverse_step(est, (k - j) / cfg.n_grid, nets, cfg, rng)
    return est


def augment(
    g: Graph,
    y: np.ndarray,
    y_mask: np.ndarray,
    predictor: PredictorParams,
    nets,
    cfg: SdeConfig,
    aug_cfg: AugmentConfig,
    pool: Sequence[Graph],
    table: NodeTypeTable,
    rng: np.random.Generator,
    spec: TaskSpec,
) -> AugmentedExample:
    """Generate one augmented example (G', y' = y) from a labeled source graph.

    Perturbs the one-hot lift d_steps grid steps forward, then walks back with
    the guided reverse step: at each outer time the guidance gradient is
    computed at a denoised surrogate (independent inner noise stream), scaled
    by the alignment ratio, and added to the score. d_steps = 0 returns the
    source graph unchanged.
    """
    y = np.asarray(y, dtype=np.float64)
    y_mask = np.asarray(y_mask, dtype=bool)
    if aug_cfg.use_label and not y_mask.any():
        raise ValidationError("fully masked label: augmentation guidance undefined")
    guided = aug_cfg.use_diversity or aug_cfg.use_label

    if aug_cfg.d_steps == 0:
        out_graph = Graph(g.node_types.copy(), g.adjacency.copy(), id=g.id)
        diag = _final_diagnostics(out_graph, g, [], predictor, spec, table, aug_cfg, y, y_mask)
        return AugmentedExample(out_graph, y.copy(), y_mask.copy(), g.id, diag)

    t_d = aug_cfg.d_steps / cfg.n_grid
    state = lift_graph(g, table.n_types)
    state = perturb(state, t_d, cfg, rng)

    negatives: list[Graph] = []
    if guided and aug_cfg.use_diversity:
        negatives = pick_negatives(
            pool, y, y_mask, aug_cfg.m_negatives, spec, rng, aug_cfg.regression_delta
        )

    for k in range(aug_cfg.d_steps, 0, -1):
        t = k / cfg.n_grid
        extra = None
        if guided:
            inner_rng = rng.spawn(1)[0]
            surrogate = denoise_estimate(state, t, nets, cfg, aug_cfg, inner_rng)
            _, lx, la, _ = guidance_loss(
                surrogate, g, y, y_mask, negatives, predictor, spec, table,
                aug_cfg.smooth_temp, include_bound=aug_cfg.use_diversity,
                include_loglik=aug_cfg.use_label,
            )
            sx, sa = nets.score_batch(state.x[None], state.a[None], state.node_mask[None], t)
            s_norm = math.sqrt(float((sx**2).sum() + (sa**2).sum()))
            g_norm = math.sqrt(float((lx**2).sum() + (la**2).sum()))
            alpha = alignment_alpha(s_norm, g_norm)
            extra = (-alpha * lx, -alpha * la)
        state = pc_reverse_step(state, t, nets, cfg, rng, extra_score=extra)

    out_graph = discretize(state, 0.5, table)
    out_graph = Graph(out_graph.node_types, out_graph.adjacency, id=g.id)
    diag = _final_diagnostics(out_graph, g, negatives, predictor, spec, table, aug_cfg, y, y_mask)
    return AugmentedExample(out_graph, y.copy(), y_mask.copy(), g.id, diag)


def _final_diagnostics(out_graph, src, negatives, predictor, spec, table, aug_cfg, y, y_mask):
    lifted = lift_graph(out_graph, table.n_types)
    feat_out = statistical_features(lifted, table, aug_cfg.smooth_temp)
    feat_src = statistical_features(lift_graph(src, table.n_types), table, aug_cfg.smooth_temp)
    cosine = _cosine(feat_out.values, feat_src.values)
    bound = float("nan")
    if negatives:
        bound = info_nce_bound(lifted, src, negatives, table, aug_cfg.smooth_temp)
    loglik = float("nan")
    if y_mask.any():
        loglik = label_loglik(lifted, y, y_mask, predictor, spec)
    return {"bound": bound, "loglik": loglik, "feature_cosine": cosine}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def augmented_to_record(ae: AugmentedExample) -> str:
    """Graph JSONL record with source_id and diagnostics fields added."""
    iu, ju = np.nonzero(np.triu(ae.graph.adjacency, 1))
    obj = {
        "nodes": ae.graph.node_types.tolist(),
        "edges": [[int(u), int(v)] for u, v in zip(iu, ju)],
        "label": [float(v) if m else None for v, m in zip(ae.label, ae.label_mask)],
        "id": ae.graph.id,
        "source_id": ae.source_id,
        "diagnostics": {k: (None if isinstance(v, float) and math.isnan(v) else v)
                        for k, v in ae.diagnostics.items()},
    }
    return json.dumps(obj)


def save_augmented_jsonl(path: str, examples: Sequence[AugmentedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ae in examples:
            fh.write(augmented_to_record(ae) + "\n")
