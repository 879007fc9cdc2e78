"""refval: training-time data valuation with adaptive reference points.

Values are assigned in parameter space: each sample's gradient step is scored
by how much closer it would have moved the model to a reference state, with
the reference chosen adaptively a few steps into the future (bounded-memory,
available during training) or statically as the final parameters (full replay).
Leave-one-out, influence-function and gradient-norm baselines plus a
corruption-detection harness round out the toolkit.
"""

__version__ = "0.1.0"

from .numkit import RngState, axpy, gaussian_draw, norm2
from .dataio import (CorruptionSpec, CsvSchema, Dataset, NATIVE_SCHEMA, corrupt,
                     corruption_manifest, load_csv, load_idx, save_csv,
                     synth_gaussian_blobs)
from .model import ModelSpec, ParamVector, batch_grad, batch_loss, init_params, \
    hessian_vector_product, per_sample_grad, per_sample_grads
from .trainer import (LrSchedule, StepRecord, TrainConfig, TrajectoryStore,
                      run_training, sample_batch, sgd_step)
from .valuation import (AdaptiveValuator, ValuationLedger, ValuationParams,
                        WindowState, basic_valuate, hypothetical_state,
                        reference_step, step_value, volatility_probe,
                        window_update)
from .baselines import (BaselineResult, gradnorm_values, influence_values,
                        loo_values)
from .bench import (DetectionReport, ExperimentConfig, detection_metric,
                    early_detection_curve, export_results, run_experiment)

__all__ = [
    "__version__",
    "RngState", "axpy", "gaussian_draw", "norm2",
    "CorruptionSpec", "CsvSchema", "Dataset", "NATIVE_SCHEMA", "corrupt",
    "corruption_manifest", "load_csv", "load_idx", "save_csv",
    "synth_gaussian_blobs",
    "ModelSpec", "ParamVector", "batch_grad", "batch_loss", "init_params",
    "hessian_vector_product", "per_sample_grad", "per_sample_grads",
    "LrSchedule", "StepRecord", "TrainConfig", "TrajectoryStore",
    "run_training", "sample_batch", "sgd_step",
    "AdaptiveValuator", "ValuationLedger", "ValuationParams", "WindowState",
    "basic_valuate", "hypothetical_state", "reference_step", "step_value",
    "volatility_probe", "window_update",
    "BaselineResult", "gradnorm_values", "influence_values", "loo_values",
    "DetectionReport", "ExperimentConfig", "detection_metric",
    "early_detection_curve", "export_results", "run_experiment",
]
