"""Prototype drift compensation for exemplar-free class-incremental learning."""

from .data import (
    Task,
    TaskStream,
    apply_label_fraction,
    default_drift_scenario,
    generate_blob_stream,
    generate_drift_scenario,
    load_feature_dataset,
    save_feature_dataset,
    train_test_split,
)
from .drift import (
    Projector,
    ProjectorConfig,
    chain_report,
    fit_projector,
    ldc_correct,
    oracle_correct,
    sdc_correct,
    train_projector,
)
from .evaluation import accuracy_over_seen, cosine_drift_distribution, ncm_classify
from .experiment import ExperimentConfig, load_config, parse_config, run_ablation, run_experiment
from .prototypes import FeatureBank, PrototypePool, compute_prototypes, update_pool
from .toy import run_toy
from .training import (
    ClassifierHead,
    FeatureExtractor,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    snapshot,
    train_finetune,
    train_joint,
    train_lwf,
)

__version__ = "0.1.0"
