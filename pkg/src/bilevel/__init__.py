"""Exact hypergradients through unrolled optimisation, for hyperparameter tuning and meta-learning."""

from .diffgraph import FlatVector, Layout, Tape, TapeBuilder, forward_eval, jvp, jvp_batch, value_and_vjp, vjp
from .dynamics import DynamicsSpec, Trace, gd_step, sgdm_step, unroll
from .estimators import BilevelLogisticRegression, FewShotClassifier, HyperRepresentation
from .exceptions import (BilevelError, ConfigurationError, DivergenceError, NumericError, PreconditionError,
                         ShapeError, StaleTraceError)
from .hypergrad import (HyperGrad, approx_hypergrad, finite_diff_check, forward_hypergrad, reverse_hypergrad,
                        rtho_partial, tune_hyperparams)
from .meta import MetaConfig, ReprModel, evaluate_meta, meta_grad, meta_objective, train_meta
from .problems import HyperParams, LogisticHOProblem, QuadraticProblem

__version__ = "0.1.0"

__all__ = [
    "FlatVector", "Layout", "Tape", "TapeBuilder", "forward_eval", "jvp", "jvp_batch", "value_and_vjp", "vjp",
    "DynamicsSpec", "Trace", "gd_step", "sgdm_step", "unroll",
    "BilevelLogisticRegression", "FewShotClassifier", "HyperRepresentation",
    "BilevelError", "ConfigurationError", "DivergenceError", "NumericError", "PreconditionError", "ShapeError",
    "StaleTraceError",
    "HyperGrad", "approx_hypergrad", "finite_diff_check", "forward_hypergrad", "reverse_hypergrad",
    "rtho_partial", "tune_hyperparams",
    "MetaConfig", "ReprModel", "evaluate_meta", "meta_grad", "meta_objective", "train_meta",
    "HyperParams", "LogisticHOProblem", "QuadraticProblem",
]
