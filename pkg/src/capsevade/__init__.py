"""Evasion attacks against capsule-presence encoders.

The package bundles a small reverse-mode autodiff engine, a differentiable
surrogate capsule encoder, an unsupervised k-means + assignment-matching
classifier, three perturbation-generation algorithms, and an experiment
harness with a command-line front end.
"""

from capsevade.attack import (
    AttackConfig,
    AttackResult,
    AttackTarget,
    capsule_subset,
    compute_mask,
    gdu_attack,
    make_target,
    opt_attack,
    psc_attack,
    run_attack,
)
from capsevade.classifier import (
    ClassifierModel,
    KMeansModel,
    LabelPermutation,
    classify,
    fit_permutation,
    hungarian,
    kmeans_fit,
    load_classifier,
    save_classifier,
)
from capsevade.encoder import (
    CapsuleOutput,
    EncoderParams,
    TrainConfig,
    encode,
    load_encoder,
    presence_for,
    save_encoder,
    train,
)
from capsevade.estimators import EvasionAttack, PresenceKMeans, SurrogateEncoder
from capsevade.harness import (
    Dataset,
    ExperimentReport,
    load_idx,
    minmax_normalize,
    run_experiment,
    select_correct,
    toy_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackTarget",
    "CapsuleOutput",
    "ClassifierModel",
    "Dataset",
    "EncoderParams",
    "EvasionAttack",
    "ExperimentReport",
    "KMeansModel",
    "LabelPermutation",
    "PresenceKMeans",
    "SurrogateEncoder",
    "TrainConfig",
    "capsule_subset",
    "classify",
    "compute_mask",
    "encode",
    "fit_permutation",
    "gdu_attack",
    "hungarian",
    "kmeans_fit",
    "load_classifier",
    "load_encoder",
    "load_idx",
    "make_target",
    "minmax_normalize",
    "opt_attack",
    "presence_for",
    "psc_attack",
    "run_attack",
    "run_experiment",
    "save_classifier",
    "save_encoder",
    "select_correct",
    "toy_dataset",
    "train",
]
