"""Federated learning with incremental sensing, over-the-air aggregation and edge cost accounting."""

from .analysis import (AssumptionConstants, BoundReport, Probe, TrainingTrace, complexity_proxies,
                       estimate_constants, fedavg_lr_feasible, fedsgd_lr_feasible, max_feasible_eta, lemma1_residual,
                       theorem1_bound, theorem2_bound)
from .channel import AggregationResult, ChannelRealization, draw_channel, ota_aggregate, power_control
from .config import ExperimentConfig, load_config
from .core import AggregationWeights, SensingSchedule, weight_fraction, weighted_sum
from .datasets import SampleBatch
from .harness import ExperimentResult, run_experiment, run_round
from .learning import (LocalUpdateConfig, ModelSpec, fedavg_global_update, fedavg_local_update,
                       fedsgd_global_update, local_gradient, local_loss)
from .sensing import DeviceState, PartitionSpec, build_schedule, partition_assign, sense
from .sweep import run_sweep

__version__ = "0.1.0"
