"""Continuous-perturbation autoregressive training for bigram language models.

A library plus CLI for learning a neural bigram model jointly with a
trainable embedding-space perturbation process: synthetic perturbed-bigram
data generation, score-based training with optional debiasing, perturbed
inference, and the replication/ablation evaluation protocol.
"""

__version__ = "0.1.0"

from .datagen import Corpus, World, build_world, generate_corpus, oracle_transition, unseen_pairs
from .evaluation import AblationMode, ResultRow, RunSettings, ablation_run, mae_on_pairs, run_replications
from .inference import PerturbMode, generate, model_transition_matrix
from .models import (
    BigramParams,
    EmbeddingTable,
    FlatSchema,
    GroundTruthPerturbParams,
    ModelDims,
    ModelParams,
    PerturbParams,
    bigram_probs,
    build_embedding_table,
    ground_truth_perturbation,
    init_model_params,
    perturbation,
    score_log_prob,
)
from .numerics import (
    RngStream,
    categorical_sample,
    dirichlet_row,
    gaussian_vector,
    grad_check,
    rng_new,
    rng_split,
    softmax,
)
from .training import (
    TrainConfig,
    TrainHistory,
    fisher_consistency_probe,
    minibatch_objective,
    optimizer_step,
    psi_mean,
    train,
    train_mle_baseline,
)
