"""Shared-weight pattern-pruned models for energy-harvesting devices.

Train several pruned models that share weights, search their pruning
patterns, pack them into one compressed bundle and run them adaptively on a
simulated intermittently-powered device.
"""
from .codec import (
    SwmBundle,
    SwmFormatError,
    compress,
    condensed_forward,
    deserialize,
    extract,
    extract_model,
    load_bundle,
    reconstruct_dense,
    save_bundle,
    serialize,
)
from .latency import CalibrationSample, LatencyPredictor, fit_profile, predict_layer, predict_model
from .patterns import Pattern, PatternLibrary, generate_pattern_space, layer_masks, uniform_assignment
from .runtime import (
    DeviceProfile,
    EnergyState,
    PowerTrace,
    adaptive_select,
    energy_tracker_update,
    measure_extraction_overhead,
    run_adaptive,
    run_inference_intermittent,
    simulate_power,
)
from .search import PatternSearch, RewardConfig, compute_reward, policy_gradient_update, sample_actions, search
from .shared_training import SharedWeightTrainer, build_mask_schedule, train_shared_sequence, verify_sharing
from .tensor_nn import FC, Conv, NetworkDef, Pool, TrainedModel, forward, make_synthetic_dataset, toy_network

__version__ = "0.1.0"
