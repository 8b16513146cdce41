"""Time-dependent prediction of fresh-concrete properties from surrogate-mixer
image sequences, with a synthetic data generator and a full experiment harness."""

from .datapipe import (Frame, InputSet, NormStats, apply_norm, assemble_input_sets, augment,
                       build_concrete_sets, build_dataset, denorm, fit_norm_stats,
                       load_campaign, mask_paddle, select_channels, verify_sync)
from .estimator import FreshPropertyRegressor, validate_input_sets
from .evaluator import (MetricReport, PredictionRecord, SweepCurve, average_predictions,
                        averaging_study, epsilon_metrics, run_ablation, time_sweep)
from .flow import FlowParams, farneback_flow
from .kernels import NesterovSGD, gradient_check, he_uniform
from .model import (CheckpointBundle, ModelConfig, PropertyNet, desk_config, load_checkpoint,
                    full_scale_config, save_checkpoint)
from .protocol import (COMBINATION_NAMES, FoldPlan, InputCombination, MixDesign,
                       ReferenceCombination, ReferenceMeasurement, compute_delta_t,
                       enumerate_combinations, make_folds, parse_combination)
from .synthgen import CampaignSpec, LatentCurves, generate_campaign, load_truth
from .trainer import TrainConfig, TrainResult, masked_mse, mean_baseline, total_loss, train_fold

__version__ = "0.1.0"
