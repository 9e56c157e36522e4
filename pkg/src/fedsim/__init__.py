"""Federated learning simulation: synthetic heterogeneous data, round engines, device metrics."""

from .dataset import (DatasetStats, DeviceData, FederatedDataset, dataset_stats, filter_min_samples,
                      load_dataset, mix_iid, save_dataset, split_train_val_test, subsample_devices)
from .fedalgo import (FedConfig, FedState, RoundLog, evaluate, evaluate_personalized, fedavg_round,
                      minibatch_sgd_round, reptile_round, run_rounds, train_global_iid, train_local)
from .metrics import AccuracySummary, SystemsBudget, stratified_accuracy, summarize_accuracy, systems_budget
from .model import ModelSpec
from .runner import export_csv, run_experiment
from .config import validate_config
from .synthgen import SynthConfig, generate_synthetic

__version__ = "0.1.0"
