"""Asynchronous wireless power allocation with aggregation-GNN policies.

Simulates random interference networks with asynchronous node activation,
implements the local aggregation message-passing protocol plus the shared
convolutional policy on top of it, trains the policy with a model-free
primal-dual method, and benchmarks against WMMSE, equal, and random
allocation.
"""

__version__ = "0.1.0"

from .network import (
    ChannelConfig,
    ChannelSample,
    Topology,
    generate_topology,
    pathloss_gain,
    sample_channel,
)
from .activation import (
    ActivationPatternSet,
    ActivationTrace,
    BernoulliActivation,
    build_pattern_sets,
    sample_active_set,
)
from .aggregation import (
    AggregationBuffer,
    aggregate_step,
    aggregation_oracle,
    effective_adjacency,
    run_aggregation,
)
from .policy import (
    AllocationDecision,
    PolicyParameters,
    forward,
    init_params,
    load_params,
    sample_allocation,
    save_params,
    score_gradient,
)
from .metrics import PerformanceReport, evaluate_policy, link_capacity
from .baselines import equal_allocation, random_allocation, wmmse_k
from .trainer import (
    DualVariables,
    LocalCopyStore,
    TrainConfig,
    TrainingDiverged,
    dual_step,
    estimate_policy_gradient,
    local_copy_update,
    primal_step,
    train_loop,
)
