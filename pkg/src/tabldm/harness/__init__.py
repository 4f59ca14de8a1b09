"""Experiment harness: metrics, reference predictors, robustness
perturbations, linear probing, retrieval-guided fine-tuning, power-law
fitting, synthetic task evaluation, and the suite driver."""
from ..tabular import load_csv, save_csv
from .baselines import (baseline_impute, impute_score, majority_accuracy,
                        majority_class, mean_value, nn_accuracy, nn_predict)
from .evaluate import CLS_METHODS, REG_METHODS, evaluate_suite, evaluate_table
from .finetune import FinetuneConfig, finetune
from .metrics import (RankSummary, binary_auc, metrics_cls, metrics_reg,
                      rank_aggregate)
from .perturb import perturb_outliers, perturb_uninformative
from .probe import linear_probe, softmax_regression
from .scaling import ScalingFit, scaling_fit
from .tasks import TaskEval, evaluate_icl, two_gaussian_task

__all__ = [
    "load_csv", "save_csv",
    "binary_auc", "metrics_cls", "metrics_reg", "rank_aggregate", "RankSummary",
    "baseline_impute", "impute_score", "nn_predict", "nn_accuracy",
    "majority_class", "majority_accuracy", "mean_value",
    "perturb_uninformative", "perturb_outliers",
    "linear_probe", "softmax_regression",
    "ScalingFit", "scaling_fit",
    "FinetuneConfig", "finetune",
    "TaskEval", "two_gaussian_task", "evaluate_icl",
    "CLS_METHODS", "REG_METHODS", "evaluate_table", "evaluate_suite",
]
