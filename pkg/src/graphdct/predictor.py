"""GIN property predictor: training, losses, metrics, selection and input gradients.

The network embeds node types through a lookup table, stacks GIN layers
h <- mlp((1 + eps) * h + a @ h) generalized to real-valued adjacency, applies a
sum readout over real nodes and a final MLP head. Everything runs in float64
numpy with explicit backward passes, so input gradients (needed to steer the
diffusion sampler) and parameter gradients share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import DimensionError, DomainError, ValidationError
from .graphs import ContinuousGraph, Graph, batch_graphs

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class TaskSpec:
    """Prediction task description: classification or regression, K tasks."""

    kind: str
    n_tasks: int = 1
    label_std: float = 1.0

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.n_tasks < 1:
            raise ValidationError("n_tasks must be >= 1")
        if self.kind == REGRESSION and not self.label_std > 0:
            raise ValidationError("label_std must be > 0 for regression")


@dataclass
class Metrics:
    """Evaluation summary; auc for classification, mae for regression."""

    auc: float | None = None
    mae: float | None = None
    per_task: np.ndarray | None = None

    def primary(self) -> float:
        return self.auc if self.auc is not None else self.mae


@dataclass
class PredictorParams:
    """Flat parameter dict plus the architecture constants needed to run it."""

    params: nn.ParamDict
    n_types: int
    hidden: int
    n_layers: int
    n_tasks: int

    @property
    def embed_table(self) -> np.ndarray:
        return self.params["embed"]

    def copy(self) -> "PredictorParams":
        return PredictorParams(nn.copy_params(self.params), self.n_types, self.hidden, self.n_layers, self.n_tasks)


@dataclass
class PredictorHyper:
    """Optimizer and architecture settings for train_predictor."""

    n_types: int
    hidden: int = 16
    n_layers: int = 2
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-2
    n_max: int | None = None


@dataclass
class PredictorTrainResult:
    params: PredictorParams            # parameters at the best validation epoch
    history: list[float]               # mean train loss per epoch
    valid_history: list[float]
    checkpoints: list[tuple[int, PredictorParams]]
    best_epoch: int
    final_params: PredictorParams


def init_predictor(hyper: PredictorHyper, spec: TaskSpec, rng: np.random.Generator) -> PredictorParams:
    p: nn.ParamDict = {}
    H = hyper.hidden
    p["embed"] = nn.glorot(rng, hyper.n_types, H)
    for l in range(hyper.n_layers):
        p[f"layer{l}.eps"] = np.zeros(())
        nn.init_mlp(p, f"layer{l}.mlp", [H, H, H], rng)
    nn.init_mlp(p, "head", [H, H, spec.n_tasks], rng)
    p["topk.score"] = rng.normal(0.0, 1.0, size=H)
    return PredictorParams(p, hyper.n_types, H, hyper.n_layers, spec.n_tasks)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def embed_continuous(x: np.ndarray, params: PredictorParams) -> np.ndarray:
    """Map relaxed node-type rows to embeddings: x @ embed_table."""
    table = params.embed_table
    if x.shape[-1] != table.shape[0]:
        raise DimensionError(f"x has width {x.shape[-1]}, embed table expects {table.shape[0]}")
    return x @ table


def gin_layer(h: np.ndarray, a: np.ndarray, eps: float, mlp_params: nn.ParamDict, prefix: str = "mlp") -> np.ndarray:
    """One GIN update: mlp((1 + eps) * h + a @ h), row-wise.

    Works for real-valued (weighted) adjacency; a must be symmetric with zero
    diagonal.
    """
    if h.shape[-2] != a.shape[-1] or a.shape[-1] != a.shape[-2]:
        raise DimensionError("adjacency and node embedding shapes are inconsistent")
    m = (1.0 + eps) * h + a @ h
    out, _ = nn.mlp_forward(mlp_params, prefix, m)
    return out


def _forward(pp: PredictorParams, x: np.ndarray, a: np.ndarray, mask: np.ndarray):
    """Batched forward pass. x: (B,n,F), a: (B,n,n), mask: (B,n) bool."""
    P = pp.params
    mf = mask.astype(np.float64)[..., None]
    h = (x @ P["embed"]) * mf
    layer_inputs = []
    node_h = [h]
    for l in range(pp.n_layers):
        eps = float(P[f"layer{l}.eps"])
        m = (1.0 + eps) * h + a @ h
        out, inputs = nn.mlp_forward(P, f"layer{l}.mlp", m)
        layer_inputs.append(inputs)
        h = out * mf
        node_h.append(h)
    pooled = h.sum(axis=-2)
    out, head_inputs = nn.mlp_forward(P, "head", pooled)
    cache = {"x": x, "a": a, "mf": mf, "node_h": node_h, "layer_inputs": layer_inputs, "head_inputs": head_inputs}
    return out, cache


def _backward(pp: PredictorParams, cache, gout: np.ndarray, want_params: bool, want_inputs: bool):
    """Backprop gout (B,K) to parameter grads and/or input grads (gx, ga)."""
    P = pp.params
    mf = cache["mf"]
    grads: nn.ParamDict | None = {} if want_params else None
    gpooled = nn.mlp_backward(P, "head", cache["head_inputs"], gout, grads)
    gh = gpooled[..., None, :] * mf
    ga = np.zeros_like(cache["a"]) if want_inputs else None
    for l in reversed(range(pp.n_layers)):
        eps = float(P[f"layer{l}.eps"])
        h_prev = cache["node_h"][l]
        gm = nn.mlp_backward(P, f"layer{l}.mlp", cache["layer_inputs"][l], gh * mf, grads)
        if want_params:
            grads[f"layer{l}.eps"] = grads.get(f"layer{l}.eps", 0.0) + np.sum(gm * h_prev)
        if want_inputs:
            ga += np.einsum("...ik,...jk->...ij", gm, h_prev)
        gh = ((1.0 + eps) * gm + np.swapaxes(cache["a"], -1, -2) @ gm) * mf
    if want_params:
        x2 = cache["x"].reshape(-1, cache["x"].shape[-1])
        g2 = gh.reshape(-1, gh.shape[-1])
        grads["embed"] = grads.get("embed", 0.0) + x2.T @ g2
    gx = (gh @ P["embed"].T) * mf if want_inputs else None
    return grads, gx, ga


def _stack(graphs_or_states: Sequence, pp_or_ntypes, n_max: int | None = None):
    """Stack Graphs (one-hot lifted) or ContinuousGraphs into batch arrays."""
    n_types = pp_or_ntypes.n_types if hasattr(pp_or_ntypes, "n_types") else int(pp_or_ntypes)
    items = list(graphs_or_states)
    states = []
    for g in items:
        if isinstance(g, Graph):
            nm = n_max if n_max is not None else max(x.n_nodes for x in items)
            states.append(batch_graphs([g], nm, n_types)[0])
        else:
            states.append(g)
    n = max(s.x.shape[0] for s in states)
    x = np.zeros((len(states), n, n_types))
    a = np.zeros((len(states), n, n))
    mask = np.zeros((len(states), n), dtype=bool)
    for i, s in enumerate(states):
        k = s.x.shape[0]
        x[i, :k] = s.x
        a[i, :k, :k] = s.a
        mask[i, :k] = s.node_mask
    return x, a, mask


def predict(g: ContinuousGraph, params: PredictorParams) -> np.ndarray:
    """Predicted outputs for one graph: logits (classification) or raw values."""
    out, _ = _forward(params, g.x[None], g.a[None], g.node_mask[None])
    return out[0]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def per_example_loss(logits: np.ndarray, label: np.ndarray, label_mask: np.ndarray, spec: TaskSpec):
    """Mean BCE (classification) or MSE (regression) over valid label entries.

    Returns (loss, has_signal); a fully masked label yields (0.0, False).
    """
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    m = np.asarray(label_mask, dtype=bool)
    if logits.shape != label.shape or label.shape != m.shape:
        raise DimensionError("logits, label and mask lengths must match")
    if not m.any():
        return 0.0, False
    if spec.kind == CLASSIFICATION:
        z, y = logits[m], label[m]
        vals = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    else:
        vals = (logits[m] - label[m]) ** 2
    return float(vals.mean()), True


def _batch_labels(graphs: Sequence[Graph], n_tasks: int):
    y = np.zeros((len(graphs), n_tasks))
    m = np.zeros((len(graphs), n_tasks), dtype=bool)
    for i, g in enumerate(graphs):
        if g.label is not None:
            if g.label.shape[0] != n_tasks:
                raise DimensionError("label length does not match task count")
            y[i] = g.label
            m[i] = g.label_mask
    return y, m


def _batch_loss_and_grad(out: np.ndarray, y: np.ndarray, m: np.ndarray, spec: TaskSpec):
    """Mean per-example loss over examples with signal, and d(loss)/d(out)."""
    n_valid = m.sum(axis=1)
    signal = n_valid > 0
    denom = np.where(signal, n_valid, 1)[:, None]
    n_sig = max(int(signal.sum()), 1)
    if spec.kind == CLASSIFICATION:
        vals = np.maximum(out, 0.0) - out * y + np.log1p(np.exp(-np.abs(out)))
        gout = (1.0 / (1.0 + np.exp(-out)) - y) * m / denom / n_sig
    else:
        vals = (out - y) ** 2
        gout = 2.0 * (out - y) * m / denom / n_sig
    per_ex = (vals * m).sum(axis=1) / denom[:, 0]
    loss = float(per_ex[signal].mean()) if signal.any() else 0.0
    gout = gout * signal[:, None]
    return loss, gout


def dataset_losses(data: Sequence[Graph], params: PredictorParams, spec: TaskSpec):
    """Per-example losses and signal flags for a dataset."""
    x, a, mask = _stack(data, params)
    out, _ = _forward(params, x, a, mask)
    y, m = _batch_labels(data, spec.n_tasks)
    losses = np.empty(len(data))
    signal = np.empty(len(data), dtype=bool)
    for i in range(len(data)):
        losses[i], signal[i] = per_example_loss(out[i], y[i], m[i], spec)
    return losses, signal


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_predictor(
    train: Sequence[Graph],
    valid: Sequence[Graph],
    spec: TaskSpec,
    hyper: PredictorHyper,
    seed: int,
    start_params: PredictorParams | None = None,
    checkpoint_every: int | None = None,
) -> PredictorTrainResult:
    """Train the GIN predictor with Adam on mini-batches.

    Deterministic given the seed. Returns the parameters of the epoch with the
    lowest mean validation loss (initialization when epochs == 0), the train
    loss history, and periodic checkpoints when ``checkpoint_every`` is set.
    """
    if len(train) == 0:
        raise ValidationError("training set must be non-empty")
    rng = np.random.default_rng(seed)
    pp = start_params.copy() if start_params is not None else init_predictor(hyper, spec, rng)

    n_max = hyper.n_max or max(g.n_nodes for g in list(train) + list(valid))
    x, a, mask = _stack(train, pp, n_max=n_max)
    y, m = _batch_labels(train, spec.n_tasks)
    if valid:
        vx, va, vmask = _stack(valid, pp, n_max=n_max)
        vy, vm = _batch_labels(valid, spec.n_tasks)

    opt = nn.Adam(lr=hyper.lr)
    history: list[float] = []
    valid_history: list[float] = []
    checkpoints: list[tuple[int, PredictorParams]] = []
    best = (math.inf, 0, pp.copy())

    n = len(train)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            out, cache = _forward(pp, x[idx], a[idx], mask[idx])
            loss, gout = _batch_loss_and_grad(out, y[idx], m[idx], spec)
            grads, _, _ = _backward(pp, cache, gout, want_params=True, want_inputs=False)
            opt.step(pp.params, grads)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))

        if valid:
            vout, _ = _forward(pp, vx, va, vmask)
            vloss, _ = _batch_loss_and_grad(vout, vy, vm, spec)
        else:
            vloss = history[-1]
        valid_history.append(float(vloss))
        if vloss < best[0]:
            best = (vloss, epoch + 1, pp.copy())
        if checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            checkpoints.append((epoch + 1, pp.copy()))

    return PredictorTrainResult(
        params=best[2],
        history=history,
        valid_history=valid_history,
        checkpoints=checkpoints,
        best_epoch=best[1],
        final_params=pp,
    )


# ---------------------------------------------------------------------------
# Evaluation / selection
# ---------------------------------------------------------------------------

def _auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUC by the rank statistic; ties contribute 1/2 via average ranks."""
    ranks = rankdata(scores)
    pos = labels > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(data: Sequence[Graph], params: PredictorParams, spec: TaskSpec) -> Metrics:
    """AUC (classification, averaged over tasks with both classes) or MAE."""
    if len(data) == 0:
        raise ValidationError("evaluate needs at least one example")
    x, a, mask = _stack(data, params)
    out, _ = _forward(params, x, a, mask)
    y, m = _batch_labels(data, spec.n_tasks)
    if not m.any():
        raise ValidationError("evaluate needs at least one valid label entry")

    per_task = np.full(spec.n_tasks, np.nan)
    if spec.kind == CLASSIFICATION:
        for t in range(spec.n_tasks):
            sel = m[:, t]
            labels = y[sel, t]
            if sel.any() and np.unique(labels > 0.5).size == 2:
                per_task[t] = _auc_rank(out[sel, t], labels)
        if np.isnan(per_task).all():
            raise ValidationError("AUC undefined: no task has both classes")
        return Metrics(auc=float(np.nanmean(per_task)), per_task=per_task)
    for t in range(spec.n_tasks):
        sel = m[:, t]
        if sel.any():
            per_task[t] = float(np.abs(out[sel, t] - y[sel, t]).mean())
    return Metrics(mae=float(np.nanmean(per_task)), per_task=per_task)


def select_lowest_loss(
    data: Sequence[Graph], params: PredictorParams, spec: TaskSpec, top_n_percent: float
) -> list[Graph]:
    """The ceil(top_n_percent/100 * N) graphs with smallest per-example loss.

    Ties keep dataset order; fully masked examples are excluded.
    """
    if len(data) == 0:
        raise ValidationError("select_lowest_loss needs a non-empty dataset")
    if not (0.0 < top_n_percent <= 100.0):
        raise DomainError("top_n_percent must lie in (0, 100]")
    losses, signal = dataset_losses(data, params, spec)
    k = math.ceil(top_n_percent / 100.0 * len(data))
    eligible = np.flatnonzero(signal)
    if eligible.size < k:
        raise ValidationError(f"only {eligible.size} examples with labels, need {k}")
    order = eligible[np.argsort(losses[eligible], kind="stable")]
    return [data[i] for i in order[:k]]


# ---------------------------------------------------------------------------
# Guidance hooks
# ---------------------------------------------------------------------------

def label_loglik(g: ContinuousGraph, y, y_mask, params: PredictorParams, spec: TaskSpec) -> float:
    ll, _, _ = label_loglik_grad(g, y, y_mask, params, spec, want_grad=False)
    return ll


def label_loglik_grad(
    g: ContinuousGraph,
    y: np.ndarray,
    y_mask: np.ndarray,
    params: PredictorParams,
    spec: TaskSpec,
    want_grad: bool = True,
):
    """log p(y | f(g)) and its gradients w.r.t. the continuous inputs.

    Classification uses the Bernoulli log-likelihood of the logits; regression
    a Gaussian with scale spec.label_std, summed over valid entries. The
    adjacency gradient is projected onto the symmetric zero-diagonal subspace.
    """
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(y_mask, dtype=bool)
    if not m.any():
        raise ValidationError("label fully masked: guidance likelihood undefined")
    out, cache = _forward(params, g.x[None], g.a[None], g.node_mask[None])
    z = out[0]
    if spec.kind == CLASSIFICATION:
        ll = -(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
        gz = (y - 1.0 / (1.0 + np.exp(-z))) * m
    else:
        ll = -((z - y) ** 2) / (2.0 * spec.label_std**2)
        gz = -(z - y) / spec.label_std**2 * m
    total = float(ll[m].sum())
    if not want_grad:
        return total, None, None
    _, gx, ga = _backward(params, cache, gz[None], want_params=False, want_inputs=True)
    gx, ga = gx[0], ga[0]
    ga = 0.5 * (ga + ga.T)
    np.fill_diagonal(ga, 0.0)
    mf = g.node_mask.astype(np.float64)
    gx *= mf[:, None]
    ga *= np.outer(mf, mf)
    return total, gx, ga


def topk_subgraph(g: Graph, params: PredictorParams, k: int) -> np.ndarray:
    """Indices of the k nodes with largest learned importance scores."""
    if k > g.n_nodes or k < 1:
        raise DomainError(f"k={k} out of range for a graph with {g.n_nodes} nodes")
    x, a, mask = _stack([g], params)
    _, cache = _forward(params, x, a, mask)
    h_final = cache["node_h"][-1][0, : g.n_nodes]
    scores = h_final @ params.params["topk.score"]
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_predictor(path: str, pp: PredictorParams) -> None:
    meta = {"kind": "predictor", "n_types": pp.n_types, "hidden": pp.hidden,
            "n_layers": pp.n_layers, "n_tasks": pp.n_tasks}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(nn.params_to_json(pp.params, meta))


def load_predictor(path: str) -> PredictorParams:
    with open(path, "r", encoding="utf-8") as fh:
        params, meta = nn.params_from_json(fh.read())
    return PredictorParams(params, meta["n_types"], meta["hidden"], meta["n_layers"], meta["n_tasks"])
