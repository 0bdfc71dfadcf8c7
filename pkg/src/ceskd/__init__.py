"""Curriculum-based expert selection for knowledge distillation (CES-KD).

A numpy training engine for logit distillation: difficulty-score a dataset
with a reference model, bucket it easy to hard, give each bucket to the
teacher/assistant of matching capacity, and distil a compact student with
one expert per mini-batch. TAKD, DGKD and vanilla KD baselines are included.
"""
from .curriculum import (BucketPlan, RankedDataset, ScoredSample, SelectionPolicy, assign_experts,
                         bucketize, epoch_iterator, rank, score_dataset)
from .data import Dataset, gen_synthetic, load_cifar10_bin, load_idx
from .engine import (DistillationPath, ExpertPool, Metrics, ModelSpec, RunConfig, distill_step,
                     evaluate, make_spec, run_path, train_scratch)
from .estimator import DifficultyScorer, DistilledClassifier, NeuralNetClassifier
from .losses import (KDHyperparams, ceskd_total_loss, cross_entropy_soft, ensemble_kd_loss,
                     kd_select_loss, tempered_softmax)
from .nn import LRSchedule, Model, OptimizerState, backward, forward, init_weights, lr_at, sgd_step

__all__ = [
    "BucketPlan", "RankedDataset", "ScoredSample", "SelectionPolicy", "assign_experts", "bucketize",
    "epoch_iterator", "rank", "score_dataset",
    "Dataset", "gen_synthetic", "load_cifar10_bin", "load_idx",
    "DistillationPath", "ExpertPool", "Metrics", "ModelSpec", "RunConfig", "distill_step", "evaluate",
    "make_spec", "run_path", "train_scratch",
    "DifficultyScorer", "DistilledClassifier", "NeuralNetClassifier",
    "KDHyperparams", "ceskd_total_loss", "cross_entropy_soft", "ensemble_kd_loss", "kd_select_loss",
    "tempered_softmax",
    "LRSchedule", "Model", "OptimizerState", "backward", "forward", "init_weights", "lr_at", "sgd_step",
]

__version__ = "0.1.0"
