"""Deterministic federated-learning simulator with mean-field adaptive rates."""

__version__ = "0.1.0"

from .data import (Dataset, HeterogeneityReport, Partition, heterogeneity,
                   load_idx, partition_dirichlet, partition_iid,
                   partition_pathological, synth_generate)
from .diagnostics import (BoundEstimates, BoundReport, beta_estimate,
                          check_drift, descent_report, estimate_bounds,
                          objective_value)
from .federation import (ExperimentConfig, RoundRecord, aggregate, evaluate,
                         local_train_baseline, local_train_fedagg,
                         run_experiment, sample_clients, server_adaptive_update)
from .meanfield import (ClientTrajectory, EtaSchedule, MeanFieldSchedule,
                        SolverReport, backward_eta, costate_eta,
                        forward_trajectories, residual, solve_round,
                        update_estimators)
from .models import (Batch, ModelSpec, finite_diff_gradient, gradient, loss,
                     sgd_step)
