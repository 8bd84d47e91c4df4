from .networks import (DUAL, MLP, PRIMAL, RBN, MlpNet, Policy, RbnNet, eval_policy, grad_check,
                       mlp_template, rbn_features, rbn_template)
from .training import (LabeledSample, LabeledSet, TrainConfig, TrainingDiverged, dual_certificate,
                       primal_certificate, train_dual, train_primal)
from .io import PolicyFormatError, load_policy, policy_from_bytes, policy_to_bytes, save_policy

__all__ = [
    "DUAL", "MLP", "PRIMAL", "RBN", "MlpNet", "Policy", "RbnNet", "eval_policy", "grad_check",
    "mlp_template", "rbn_features", "rbn_template", "LabeledSample", "LabeledSet", "TrainConfig",
    "TrainingDiverged", "dual_certificate", "primal_certificate", "train_dual", "train_primal",
    "PolicyFormatError", "load_policy", "policy_from_bytes", "policy_to_bytes", "save_policy",
]
