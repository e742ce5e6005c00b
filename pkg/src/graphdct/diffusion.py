"""Variance-exploding SDE on graphs: forward perturbation, denoising score
matching, and the predictor-corrector reverse sampler.

Node features and adjacency are perturbed independently; adjacency noise is
drawn on the upper triangle and mirrored so states stay in the symmetric
zero-diagonal subspace. Score networks output s = raw / sigma(t), so the DSM
objective reduces to regressing the raw outputs onto -z with the standard
sigma(t)^2 kernel weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import nn
from .errors import DomainError, ValidationError
from .graphs import ContinuousGraph, Graph, NodeTypeTable, batch_graphs, discretize


@dataclass
class SdeConfig:
    """Knobs of the VE SDE and its predictor-corrector discretization."""

    sigma_min: float = 0.1
    sigma_max: float = 10.0
    n_grid: int = 1000
    snr: float = 0.16
    eps1: float = 1.0
    corrector_steps: int = 1

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValidationError("need 0 < sigma_min < sigma_max")
        if self.n_grid < 2:
            raise ValidationError("n_grid must be >= 2")
        if self.snr <= 0 or self.eps1 < 0 or self.corrector_steps < 0:
            raise ValidationError("invalid corrector settings")


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("time must lie in [0, 1]")
    return t


def sigma_at(t, cfg: SdeConfig):
    """Perturbation kernel std: sigma_min * (sigma_max / sigma_min) ** t."""
    t = _check_time(t)
    out = cfg.sigma_min * (cfg.sigma_max / cfg.sigma_min) ** t
    return float(out) if np.isscalar(t) or t.ndim == 0 else out


def diffusion_coeff(t, cfg: SdeConfig):
    """g(t) = sigma(t) * sqrt(2 ln(sigma_max / sigma_min)); the drift is zero."""
    s = sigma_at(t, cfg)
    return s * math.sqrt(2.0 * math.log(cfg.sigma_max / cfg.sigma_min))


def _grid_index(t: float, cfg: SdeConfig) -> int:
    k = t * cfg.n_grid
    k_round = round(k)
    if k_round < 1 or abs(k - k_round) > 1e-6:
        raise DomainError(f"t={t} is not a positive grid point of n_grid={cfg.n_grid}")
    return int(k_round)


def _sym_noise(rng: np.random.Generator, n: int, batch: int | None = None) -> np.ndarray:
    """Standard normal on the upper triangle, mirrored; zero diagonal."""
    shape = (n, n) if batch is None else (batch, n, n)
    z = np.triu(rng.standard_normal(shape), 1)
    return z + np.swapaxes(z, -1, -2)


def _apply_masks(x: np.ndarray, a: np.ndarray, mask: np.ndarray):
    """Re-impose padding, symmetry and zero diagonal on batched state arrays."""
    mf = mask.astype(np.float64)
    x = x * mf[..., None]
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    a = a * (mf[..., None, :] * mf[..., :, None])
    idx = np.arange(a.shape[-1])
    a[..., idx, idx] = 0.0
    return x, a


class ScoreNetHyper(NamedTuple):
    """Architecture and optimizer settings for the score networks."""

    n_types: int
    hidden: int = 64
    steps: int = 1200
    batch_size: int = 128
    lr: float = 1e-3


class ScoreNetworks:
    """Two small networks estimating the scores of perturbed x and a.

    s_x is a per-node MLP over [x_i, (a@x)_i, deg_i, t, ln sigma(t)]; s_a is a
    per-pair MLP over symmetric pair features, so its output is symmetric by
    construction. Both are scaled by 1/sigma(t) and vanish outside the node
    mask.
    """

    def __init__(self, params: nn.ParamDict, n_types: int, hidden: int, cfg: SdeConfig):
        self.params = params
        self.n_types = n_types
        self.hidden = hidden
        self.cfg = cfg

    @classmethod
    def init(cls, hyper: ScoreNetHyper, cfg: SdeConfig, rng: np.random.Generator) -> "ScoreNetworks":
        F, H = hyper.n_types, hyper.hidden
        params: nn.ParamDict = {}
        nn.init_mlp(params, "sx", [2 * F + 3, H, H, F], rng)
        nn.init_mlp(params, "sa", [2 * F + 4, H, H, 1], rng)
        return cls(params, F, H, cfg)

    def _inputs(self, x: np.ndarray, a: np.ndarray, mask: np.ndarray, t):
        B, n, F = x.shape
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        sig = sigma_at(tt, self.cfg)
        tfe = np.stack([tt, np.log(sig)], axis=-1)  # (B, 2)
        ax = a @ x
        deg = a.sum(axis=-1, keepdims=True)
        node_in = np.concatenate(
            [x, ax, deg, np.broadcast_to(tfe[:, None, :], (B, n, 2))], axis=-1
        )
        xi = x[:, :, None, :]
        xj = x[:, None, :, :]
        pair_in = np.concatenate(
            [
                xi + xj,
                xi * xj,
                a[..., None],
                deg[:, :, None, :] + deg[:, None, :, :],
                np.broadcast_to(tfe[:, None, None, :], (B, n, n, 2)),
            ],
            axis=-1,
        )
        return node_in, pair_in, sig

    def _raw(self, x: np.ndarray, a: np.ndarray, mask: np.ndarray, t, want_cache: bool = False):
        node_in, pair_in, sig = self._inputs(x, a, mask, t)
        raw_x, cache_x = nn.mlp_forward(self.params, "sx", node_in)
        raw_a, cache_a = nn.mlp_forward(self.params, "sa", pair_in)
        raw_a = raw_a[..., 0]
        mf = mask.astype(np.float64)
        raw_x = raw_x * mf[..., None]
        raw_a = raw_a * (mf[..., None, :] * mf[..., :, None])
        idx = np.arange(raw_a.shape[-1])
        raw_a[..., idx, idx] = 0.0
        if want_cache:
            return raw_x, raw_a, sig, (cache_x, cache_a)
        return raw_x, raw_a, sig

    def score_batch(self, x: np.ndarray, a: np.ndarray, mask: np.ndarray, t):
        """Batched score estimates (s_x, s_a) at time t."""
        raw_x, raw_a, sig = self._raw(x, a, mask, t)
        inv = 1.0 / sig
        return raw_x * inv[:, None, None], raw_a * inv[:, None, None]

    def score(self, g: ContinuousGraph, t: float):
        """Single-state scores; s_a is symmetric with zero diagonal."""
        sx, sa = self.score_batch(g.x[None], g.a[None], g.node_mask[None], t)
        return sx[0], sa[0]


def init_score_networks(hyper: ScoreNetHyper, cfg: SdeConfig, seed: int) -> ScoreNetworks:
    return ScoreNetworks.init(hyper, cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Forward perturbation
# ---------------------------------------------------------------------------

def perturb_batch(
    x: np.ndarray, a: np.ndarray, mask: np.ndarray, t, cfg: SdeConfig, rng: np.random.Generator
):
    """Batched forward kernel sample; returns (x_t, a_t, z_x, z_a)."""
    B, n, _ = x.shape
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    sig = sigma_at(tt, cfg)[:, None, None]
    mf = mask.astype(np.float64)
    z_x = rng.standard_normal(x.shape) * mf[..., None]
    z_a = _sym_noise(rng, n, B) * (mf[..., None, :] * mf[..., :, None])
    return x + sig * z_x, a + sig * z_a, z_x, z_a


def perturb(g0: ContinuousGraph, t: float, cfg: SdeConfig, rng: np.random.Generator) -> ContinuousGraph:
    """Sample the forward kernel: g0 + sigma(t) * z on masked entries.

    x and the upper-triangular adjacency entries get independent standard
    normal noise; the adjacency noise is mirrored and the diagonal stays zero.
    """
    if g0.time != 0.0:
        raise ValidationError("perturb expects a state at time 0")
    _check_time(t)
    x_t, a_t, _, _ = perturb_batch(g0.x[None], g0.a[None], g0.node_mask[None], t, cfg, rng)
    return ContinuousGraph(x_t[0], a_t[0], g0.node_mask.copy(), time=float(t))


# ---------------------------------------------------------------------------
# Denoising score matching
# ---------------------------------------------------------------------------

def _stack_states(states: Sequence[ContinuousGraph]):
    n = max(s.x.shape[0] for s in states)
    F = states[0].x.shape[1]
    x = np.zeros((len(states), n, F))
    a = np.zeros((len(states), n, n))
    mask = np.zeros((len(states), n), dtype=bool)
    for i, s in enumerate(states):
        k = s.x.shape[0]
        x[i, :k] = s.x
        a[i, :k, :k] = s.a
        mask[i, :k] = s.node_mask
    return x, a, mask


def _dsm_residuals(nets: ScoreNetworks, x, a, mask, cfg: SdeConfig, rng: np.random.Generator, want_cache=False):
    B, n, _ = x.shape
    k = rng.integers(1, cfg.n_grid + 1, size=B)
    t = k / cfg.n_grid
    x_t, a_t, z_x, z_a = perturb_batch(x, a, mask, t, cfg, rng)
    out = nets._raw(x_t, a_t, mask, t, want_cache=want_cache)
    raw_x, raw_a = out[0], out[1]
    res_x = raw_x + z_x
    res_a = raw_a + z_a
    upper = np.triu(np.ones((n, n)), 1)
    per_graph = (res_x**2).sum(axis=(1, 2)) + ((res_a**2) * upper).sum(axis=(1, 2))
    loss = float(per_graph.mean())
    if want_cache:
        return loss, res_x, res_a, upper, out[3]
    return loss


def dsm_loss(nets: ScoreNetworks, batch: Sequence[ContinuousGraph], cfg: SdeConfig, rng: np.random.Generator) -> float:
    """Kernel-weighted denoising score-matching loss on a batch at time 0.

    Each graph gets a uniformly sampled grid time; the loss is the per-graph
    sum of ||sigma(t) s + z||^2 over masked x entries and masked
    upper-triangular adjacency entries, averaged over the batch.
    """
    if len(batch) == 0:
        raise ValidationError("dsm_loss needs a non-empty batch")
    if any(s.time != 0.0 for s in batch):
        raise ValidationError("dsm_loss expects states at time 0")
    x, a, mask = _stack_states(batch)
    return _dsm_residuals(nets, x, a, mask, cfg, rng)


class DiffusionTrainResult(NamedTuple):
    nets: ScoreNetworks
    loss_history: list[float]


def train_diffusion(
    unlabeled: Sequence[Graph],
    cfg: SdeConfig,
    net_hyper: ScoreNetHyper,
    seed: int,
    n_max: int | None = None,
) -> DiffusionTrainResult:
    """Fit the score networks to unlabeled graphs with Adam; seed-deterministic."""
    if len(unlabeled) == 0:
        raise ValidationError("train_diffusion needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    nets = ScoreNetworks.init(net_hyper, cfg, rng)
    n_max = n_max or max(g.n_nodes for g in unlabeled)
    states = batch_graphs(list(unlabeled), n_max, net_hyper.n_types)
    x, a, mask = _stack_states(states)
    opt = nn.Adam(lr=net_hyper.lr)
    history: list[float] = []
    N = len(states)
    for _ in range(net_hyper.steps):
        idx = rng.integers(0, N, size=min(net_hyper.batch_size, N))
        loss, res_x, res_a, upper, (cache_x, cache_a) = _dsm_residuals(
            nets, x[idx], a[idx], mask[idx], cfg, rng, want_cache=True
        )
        B = idx.size
        grads: nn.ParamDict = {}
        nn.mlp_backward(nets.params, "sx", cache_x, 2.0 * res_x / B, grads)
        nn.mlp_backward(nets.params, "sa", cache_a, (2.0 * res_a * upper / B)[..., None], grads)
        opt.step(nets.params, grads)
        history.append(loss)
    return DiffusionTrainResult(nets, history)


# ---------------------------------------------------------------------------
# Predictor-corrector reverse sampling
# ---------------------------------------------------------------------------

def _channel_step_size(score: np.ndarray, noise: np.ndarray, snr: float, axes) -> float:
    """Langevin step beta = 2 (snr ||z|| / ||s||)^2 for one channel; 0 if s = 0.

    Norms are batch means of per-element norms, so a near-zero score in one
    chain cannot blow up the shared step size.
    """
    s_norm = float(np.sqrt((score**2).sum(axis=axes)).mean())
    z_norm = float(np.sqrt((noise**2).sum(axis=axes)).mean())
    if s_norm <= 0.0:
        return 0.0
    return 2.0 * (snr * z_norm / s_norm) ** 2


def pc_step_batch(
    x: np.ndarray,
    a: np.ndarray,
    mask: np.ndarray,
    t: float,
    nets,
    cfg: SdeConfig,
    rng: np.random.Generator,
    extra_score=None,
):
    """One reverse step t -> t - 1/n_grid for a batch of states.

    Predictor: Euler-Maruyama on the reverse SDE with the total score
    (network + optional extra). Corrector: ``cfg.corrector_steps`` Langevin
    updates at the new time with per-channel step sizes derived from cfg.snr
    and noise scaled by cfg.eps1. Symmetry, zero diagonal and padding are
    re-imposed after every update.
    """
    k = _grid_index(t, cfg)
    dt = 1.0 / cfg.n_grid
    B, n, _ = x.shape
    mf = mask.astype(np.float64)
    pair_mask = mf[..., None, :] * mf[..., :, None]

    def total_score(xc, ac, tc):
        sx, sa = nets.score_batch(xc, ac, mask, tc)
        if extra_score is not None:
            ex, ea = extra_score
            sx = sx + (ex if ex.ndim == 3 else ex[None])
            sa = sa + (ea if ea.ndim == 3 else ea[None])
        return sx, sa

    g_t = diffusion_coeff(t, cfg)
    sx, sa = total_score(x, a, t)
    z_x = rng.standard_normal(x.shape) * mf[..., None]
    z_a = _sym_noise(rng, n, B) * pair_mask
    x = x + g_t**2 * dt * sx + g_t * math.sqrt(dt) * z_x
    a = a + g_t**2 * dt * sa + g_t * math.sqrt(dt) * z_a
    x, a = _apply_masks(x, a, mask)

    t_next = (k - 1) / cfg.n_grid
    for _ in range(cfg.corrector_steps):
        sx, sa = total_score(x, a, t_next)
        z_x = rng.standard_normal(x.shape) * mf[..., None]
        z_a = _sym_noise(rng, n, B) * pair_mask
        beta_x = _channel_step_size(sx, z_x, cfg.snr, axes=(1, 2))
        beta_a = _channel_step_size(sa, z_a, cfg.snr, axes=(1, 2))
        x = x + 0.5 * beta_x * sx + cfg.eps1 * math.sqrt(beta_x) * z_x
        a = a + 0.5 * beta_a * sa + cfg.eps1 * math.sqrt(beta_a) * z_a
        x, a = _apply_masks(x, a, mask)
    return x, a, t_next


def pc_reverse_step(
    state: ContinuousGraph,
    t: float,
    nets,
    cfg: SdeConfig,
    rng: np.random.Generator,
    extra_score: tuple[np.ndarray, np.ndarray] | None = None,
) -> ContinuousGraph:
    """Single-state wrapper of pc_step_batch; output time is t - 1/n_grid."""
    extra = None
    if extra_score is not None:
        extra = (np.asarray(extra_score[0], dtype=np.float64), np.asarray(extra_score[1], dtype=np.float64))
    x, a, t_next = pc_step_batch(
        state.x[None], state.a[None], state.node_mask[None], t, nets, cfg, rng, extra
    )
    return ContinuousGraph(x[0], a[0], state.node_mask.copy(), time=t_next)


def sample_unconditional(
    n_nodes: int,
    nets,
    cfg: SdeConfig,
    rng: np.random.Generator,
    table: NodeTypeTable,
    edge_threshold: float = 0.5,
) -> Graph:
    """Generate one graph: start from N(0, sigma_max^2) noise at t = 1, run the
    reverse chain down to the grid floor 1/n_grid, and discretize."""
    g = sample_batch(1, n_nodes, nets, cfg, rng, table, edge_threshold)[0]
    return g


def sample_batch(
    n_samples: int,
    n_nodes: int,
    nets,
    cfg: SdeConfig,
    rng: np.random.Generator,
    table: NodeTypeTable,
    edge_threshold: float = 0.5,
) -> list[Graph]:
    """Vectorized unconditional sampling of independent chains."""
    F = table.n_types
    mask = np.ones((n_samples, n_nodes), dtype=bool)
    x = cfg.sigma_max * rng.standard_normal((n_samples, n_nodes, F))
    a = cfg.sigma_max * _sym_noise(rng, n_nodes, n_samples)
    x, a = _apply_masks(x, a, mask)
    for k in range(cfg.n_grid, 1, -1):
        x, a, _ = pc_step_batch(x, a, mask, k / cfg.n_grid, nets, cfg, rng)
    out = []
    for i in range(n_samples):
        state = ContinuousGraph(x[i], a[i], mask[i], time=1.0 / cfg.n_grid)
        out.append(discretize(state, edge_threshold, table))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_score_networks(path: str, nets: ScoreNetworks) -> None:
    meta = {
        "kind": "score_networks",
        "n_types": nets.n_types,
        "hidden": nets.hidden,
        "sde": {
            "sigma_min": nets.cfg.sigma_min,
            "sigma_max": nets.cfg.sigma_max,
            "n_grid": nets.cfg.n_grid,
            "snr": nets.cfg.snr,
            "eps1": nets.cfg.eps1,
            "corrector_steps": nets.cfg.corrector_steps,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(nn.params_to_json(nets.params, meta))


def load_score_networks(path: str) -> ScoreNetworks:
    with open(path, "r", encoding="utf-8") as fh:
        params, meta = nn.params_from_json(fh.read())
    cfg = SdeConfig(**meta["sde"])
    return ScoreNetworks(params, meta["n_types"], meta["hidden"], cfg)
