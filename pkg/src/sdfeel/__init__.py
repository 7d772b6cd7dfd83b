"""Asynchronous semi-decentralized federated edge learning, simulated deterministically.

Edge clusters train on their own deadlines, fold client updates into their
server model, gossip with neighbor servers through staleness-aware mixing
weights, and a terminal consensus phase produces the output model. A
synchronous barrier baseline shares the same pipeline for paired comparisons.
"""

from .config import ExperimentConfig, parse_config
from .data import (ClientShard, DataWeights, balanced_partition, compute_weights,
                   dirichlet_partition, export_manifest, synthesize_dataset)
from .engine import (ClientState, ClusterState, ConsensusReport, UpdateDelta,
                     broadcast, consensus_phase, inter_aggregate, intra_aggregate,
                     local_update)
from .errors import ConfigurationError, DivergedRunError, ProtocolError
from .experiment import bound_report, build_state, run_experiment
from .metrics import (AnalysisEstimates, MetricsRecord, auxiliary_global,
                      consensus_error, estimate_assumption_constants, export_trace,
                      load_trace, theorem_bound)
from .models import (BatchStream, SampleBatch, TaskSpec, evaluate_gradient,
                     evaluate_loss, finite_difference_check, quadratic_optimum)
from .simulator import (ExperimentState, LatencyParams, RunResult, StopCriteria,
                        epochs_for, iteration_latency, run_async, run_sync,
                        staleness_bound_check, suggest_deadline)
from .topology import (PsiConfig, StalenessVector, Topology, build_mixing_matrix,
                       build_ring, parse_adjacency, psi, spectral_gap,
                       uniform_neighbor_matrix)

__version__ = "0.1.0"
