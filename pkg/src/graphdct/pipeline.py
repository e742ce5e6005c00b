"""Iterative augmentation loop: train the predictor, select the easiest
graphs, augment them with the guided sampler, fold the new examples into the
training pool, and repeat.

The augmented pool is replaced (not accumulated) each iteration; originals are
never dropped. The predictor is warm-started between iterations and the
guidance always uses the latest periodic checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .augmentor import AugmentConfig, AugmentedExample, augment
from .diffusion import SdeConfig
from .errors import ValidationError
from .graphs import Graph, NodeTypeTable
from .predictor import (
    Metrics,
    PredictorHyper,
    PredictorParams,
    REGRESSION,
    TaskSpec,
    evaluate,
    select_lowest_loss,
    train_predictor,
)


class Seeds(NamedTuple):
    data: int = 0
    model: int = 1
    sampler: int = 2


@dataclass
class DctConfig:
    """Every pipeline knob in one place; mirrors the JSON config file."""

    sde: SdeConfig = field(default_factory=SdeConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    predictor_hyper: PredictorHyper = field(default_factory=lambda: PredictorHyper(n_types=3))
    top_n_percent: float = 10.0
    checkpoint_every: int = 20
    n_iterations: int = 2
    seeds: Seeds = Seeds()

    def __post_init__(self):
        if not (0.0 < self.top_n_percent <= 100.0):
            raise ValidationError("top_n_percent must lie in (0, 100]")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be positive")
        if self.n_iterations < 0:
            raise ValidationError("n_iterations must be >= 0")

    def to_dict(self) -> dict:
        return {
            "sde": vars(self.sde).copy(),
            "aug": vars(self.aug).copy(),
            "predictor_hyper": vars(self.predictor_hyper).copy(),
            "top_n_percent": self.top_n_percent,
            "checkpoint_every": self.checkpoint_every,
            "n_iterations": self.n_iterations,
            "seeds": dict(self.seeds._asdict()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DctConfig":
        return cls(
            sde=SdeConfig(**d.get("sde", {})),
            aug=AugmentConfig(**d.get("aug", {})),
            predictor_hyper=PredictorHyper(**d["predictor_hyper"]),
            top_n_percent=d.get("top_n_percent", 10.0),
            checkpoint_every=d.get("checkpoint_every", 20),
            n_iterations=d.get("n_iterations", 2),
            seeds=Seeds(**d.get("seeds", {})),
        )


@dataclass
class IterationReport:
    """Per-iteration summary of the loop."""

    iteration: int
    train_loss: float
    valid_metric: float
    n_augmented: int
    mean_bound: float
    mean_loglik: float
    mean_feature_cosine: float

    def to_dict(self) -> dict:
        return vars(self).copy()


class RunDctResult(NamedTuple):
    params: PredictorParams
    reports: list[IterationReport]
    test_metrics: Metrics
    augmented_per_iteration: list[list[AugmentedExample]]


def update_training_pool(
    original: Sequence[Graph], new_augmented: Sequence[AugmentedExample]
) -> list[Graph]:
    """Original graphs plus the newest augmented batch (earlier augmented
    batches are dropped by construction: callers pass originals, not pools)."""
    pool = list(original)
    for i, ae in enumerate(new_augmented):
        pool.append(
            Graph(
                ae.graph.node_types,
                ae.graph.adjacency,
                label=ae.label,
                label_mask=ae.label_mask,
                id=f"{ae.source_id}:aug{i}",
            )
        )
    return pool


def _resolve_regression_delta(cfg: AugmentConfig, train: Sequence[Graph], spec: TaskSpec) -> AugmentConfig:
    if spec.kind != REGRESSION or cfg.regression_delta is not None:
        return cfg
    vals = np.concatenate([g.label[g.label_mask] for g in train if g.label is not None])
    delta = float(vals.std()) or 1.0
    return AugmentConfig(
        d_steps=cfg.d_steps,
        m_negatives=cfg.m_negatives,
        inner_grid_cap=cfg.inner_grid_cap,
        regression_delta=delta,
        smooth_temp=cfg.smooth_temp,
        use_diversity=cfg.use_diversity,
        use_label=cfg.use_label,
    )


def _mean_diag(augmented: Sequence[AugmentedExample], key: str) -> float:
    vals = [ae.diagnostics.get(key, float("nan")) for ae in augmented]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def run_dct(
    train: Sequence[Graph],
    valid: Sequence[Graph],
    test: Sequence[Graph],
    nets,
    spec: TaskSpec,
    cfg: DctConfig,
    table: NodeTypeTable,
) -> RunDctResult:
    """Run the full loop and return the best-validation predictor, one report
    per iteration, and the final test metrics. Iteration 0 trains on the
    original data alone; each later iteration freezes the latest periodic
    checkpoint, augments the top-n% lowest-loss original graphs once, and
    continues training on originals + fresh augmented examples."""
    if len(train) == 0:
        raise ValidationError("run_dct needs a non-empty training set")
    aug_cfg = _resolve_regression_delta(cfg.aug, train, spec)
    hyper = cfg.predictor_hyper
    n_max = hyper.n_max or max(g.n_nodes for g in [*train, *valid, *test])
    hyper_sized = PredictorHyper(
        n_types=hyper.n_types, hidden=hyper.hidden, n_layers=hyper.n_layers,
        epochs=hyper.epochs, batch_size=hyper.batch_size, lr=hyper.lr, n_max=n_max,
    )

    model_seeds = np.random.SeedSequence(cfg.seeds.model).spawn(cfg.n_iterations + 1)
    sampler_seq = np.random.SeedSequence(cfg.seeds.sampler).spawn(max(cfg.n_iterations, 1))

    reports: list[IterationReport] = []
    augmented_history: list[list[AugmentedExample]] = []

    result = train_predictor(
        train, valid, spec, hyper_sized, seed=model_seeds[0],
        checkpoint_every=cfg.checkpoint_every,
    )
    best = (min(result.valid_history) if result.valid_history else float("inf"), result.params)
    guidance = result.checkpoints[-1][1] if result.checkpoints else result.final_params
    reports.append(
        IterationReport(
            iteration=0,
            train_loss=result.history[-1] if result.history else float("nan"),
            valid_metric=evaluate(valid, result.params, spec).primary() if valid else float("nan"),
            n_augmented=0,
            mean_bound=float("nan"),
            mean_loglik=float("nan"),
            mean_feature_cosine=float("nan"),
        )
    )

    current = result.final_params
    for it in range(1, cfg.n_iterations + 1):
        selected = select_lowest_loss(train, guidance, spec, cfg.top_n_percent)
        graph_rngs = sampler_seq[it - 1].spawn(len(selected))
        augmented = [
            augment(
                g, g.label, g.label_mask, guidance, nets, cfg.sde, aug_cfg,
                pool=train, table=table, rng=np.random.default_rng(graph_rngs[j]), spec=spec,
            )
            for j, g in enumerate(selected)
        ]
        augmented_history.append(augmented)
        pool = update_training_pool(train, augmented)

        result = train_predictor(
            pool, valid, spec, hyper_sized, seed=model_seeds[it],
            start_params=current, checkpoint_every=cfg.checkpoint_every,
        )
        current = result.final_params
        guidance = result.checkpoints[-1][1] if result.checkpoints else result.final_params
        it_best = min(result.valid_history) if result.valid_history else float("inf")
        if it_best < best[0]:
            best = (it_best, result.params)

        reports.append(
            IterationReport(
                iteration=it,
                train_loss=result.history[-1] if result.history else float("nan"),
                valid_metric=evaluate(valid, result.params, spec).primary() if valid else float("nan"),
                n_augmented=len(augmented),
                mean_bound=_mean_diag(augmented, "bound"),
                mean_loglik=_mean_diag(augmented, "loglik"),
                mean_feature_cosine=_mean_diag(augmented, "feature_cosine"),
            )
        )

    test_metrics = evaluate(test, best[1], spec)
    return RunDctResult(best[1], reports, test_metrics, augmented_history)
