"""Deterministic federated learning with differential privacy.

Simulates round-based federated SGD with two noise placements
(per-example and per-client), tracks the privacy spend with a
Renyi-divergence ledger, and ships a gradient-inversion attack harness
plus margin-based utility analysis for studying the privacy/utility
tradeoff end to end.
"""

from .accountant import DEFAULT_ORDERS, PrivacyLedger, amplified_delta, amplified_epsilon, \
    epsilon_for, ledger_query, naive_composition, rdp_subsampled_gaussian
from .attack import AttackConfig, AttackReport, attack_leak, defense_label, \
    gradient_match_loss, infer_label, make_seed, pruned_gradient_attack, \
    reconstruction_distance, run_attack, simulate_client_leak
from .config import Config, ConfigError, PRESETS, load_preset, parse_config_text
from .data import ClientShard, DataFormatError, Dataset, load_csv, load_idx, make_shards, \
    rescale_unit, sample_batch, synthetic_blobs
from .federation import FederationConfig, RoundRecord, TrainingResult, aggregate_fedavg, \
    aggregate_fedsgd, local_train_plain, local_train_private, run_training, sample_clients
from .mechanism import DpConfig, calibrate_sigma, clip_bound_at, clip_per_layer, \
    median_clip_bound, sanitize_client_update, sanitize_per_example_batch
from .modelio import load_model, save_model
from .nn import ArchSpec, GradientUpdate, ModelParams, apply_update, batch_loss_gradient, \
    build_model, evaluate_accuracy, example_loss_gradient, forward, forward_scores, \
    grad_mean, grad_scale, model_delta, parameter_count, per_example_flat_gradients, \
    sgd_step
from .streams import RandomStream
from .tradeoff import MarginBoundReport, margin, margin_gradient, margin_lipschitz, \
    noise_bound, perturb_model, prediction_flip_rate, prune_update

__version__ = "0.1.0"
