"""graphdct: task-specific graph data augmentation with guided score-based diffusion.

A score-based diffusion model is trained once on unlabeled graphs; labeled
datasets are then augmented by perturbing each selected graph a few steps and
reversing with a guided sampler that trades off diversity (a contrastive
dependence bound against the source graph) and label preservation (the frozen
predictor's label likelihood).
"""

from .augmentor import (
    AugmentConfig,
    AugmentedExample,
    alignment_alpha,
    augment,
    denoise_estimate,
    guidance_loss,
    info_nce_bound,
    pick_negatives,
    save_augmented_jsonl,
)
from .diffusion import (
    DiffusionTrainResult,
    ScoreNetHyper,
    ScoreNetworks,
    SdeConfig,
    diffusion_coeff,
    dsm_loss,
    load_score_networks,
    pc_reverse_step,
    perturb,
    sample_batch,
    sample_unconditional,
    save_score_networks,
    sigma_at,
    train_diffusion,
)
from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    DegenerateFeatureError,
    DimensionError,
    DomainError,
    EmptyGraphError,
    GenerationError,
    GraphDctError,
    InsufficientNegativesError,
    ParseError,
    ValidationError,
)
from .graphs import (
    ContinuousGraph,
    FeatureVector,
    Graph,
    NodeTypeTable,
    batch_graphs,
    discretize,
    feature_length,
    lift_graph,
    load_graphs_jsonl,
    parse_graph_record,
    save_graphs_jsonl,
    serialize_graph,
    similarity_softmax,
    statistical_features,
)
from .pipeline import (
    DctConfig,
    IterationReport,
    RunDctResult,
    Seeds,
    run_dct,
    update_training_pool,
)
from .predictor import (
    Metrics,
    PredictorHyper,
    PredictorParams,
    PredictorTrainResult,
    TaskSpec,
    embed_continuous,
    evaluate,
    gin_layer,
    init_predictor,
    label_loglik_grad,
    load_predictor,
    per_example_loss,
    predict,
    save_predictor,
    select_lowest_loss,
    topk_subgraph,
    train_predictor,
)
from .synth import (
    JointPmf,
    SyntheticTaskConfig,
    brute_force_mi,
    diversity_score,
    gen_synthetic_task,
    label_preservation_rate,
    oracle_label,
    synthetic_node_table,
)

__version__ = "0.1.0"
