"""The global training loop: client sampling, local training, aggregation.

Algorithms: ``fedagg`` (per-round adaptive rate schedules from the mean-field
solver), ``fedavg``, ``fedprox``, and the server-adaptive family ``fedadam``,
``fedadagrad``, ``fedyogi`` (clients run plain SGD; the server treats the
round delta as a pseudo-gradient).

A local "epoch" is one schedule slot l in 0..L-1.  By default each slot is a
single optimization step on one seeded mini-batch; ``steps_per_epoch`` turns
a slot into that many mini-batch steps (a full pass over a 600-sample shard
at batch 32 is 18 steps), all taken at the slot's rate.  The rate solver
always models exactly L steps regardless.

FedAgg supports two update rules: ``aggregated`` replays the solver's
trajectory (each step moves along the population-average gradient), which is
what the rate derivation assumes; ``local`` steps along the client's own
mini-batch gradient with the solved rates, which is what the training-loop
pseudocode prescribes.  Both are first-class because the two sources
genuinely disagree.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import diagnostics, meanfield, models
from .errors import (ConfigError, ContractError, NumericDivergenceError,
                     SolverConvergenceError)

FEDAGG = "fedagg"
FEDAVG = "fedavg"
FEDPROX = "fedprox"
FEDADAM = "fedadam"
FEDADAGRAD = "fedadagrad"
FEDYOGI = "fedyogi"

ALGORITHMS = (FEDAGG, FEDAVG, FEDPROX, FEDADAM, FEDADAGRAD, FEDYOGI)
SERVER_ADAPTIVE = {FEDADAM: "adam", FEDADAGRAD: "adagrad", FEDYOGI: "yogi"}

RULE_AGGREGATED = "aggregated"
RULE_LOCAL = "local"


@dataclass
class DatasetConfig:
    kind: str = "mnist"              # "mnist" | "synthetic"
    root: str = ""                   # directory holding the IDX files
    num_classes: int = 10
    input_dim: int = 20
    samples_per_class: int = 500
    test_samples_per_class: int = 100
    class_separation: float = 4.0


@dataclass
class PartitionConfig:
    scheme: str = data_mod.IID       # "iid" | "pathological" | "dirichlet"
    sigma: float = 0.6
    shards: int = 200
    shard_size: int = 300
    shards_per_client: int = 2
    equal_size: bool = True


@dataclass
class ModelConfig:
    kind: str = models.LINEAR_SOFTMAX
    hidden_dim: int = 64


@dataclass
class ExperimentConfig:
    algorithm: str = FEDAVG
    clients: int = 100
    participation_ratio: float = 0.2
    rounds: int = 30
    local_epochs: int = 3
    steps_per_epoch: int = 1
    base_lr: float = 0.01
    batch_size: int = 32
    seed: int = 0
    # fedagg
    alpha: float = 0.1
    epsilon: float = 0.001
    max_sweeps: int = 100
    fedagg_update_rule: str = RULE_AGGREGATED
    eta_min: float = 0.0
    eta_max: float = 1.0
    # fedprox
    mu: float = 0.01
    # server-adaptive family
    server_lr: float = -1.0          # -1 means "use base_lr"
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 0.001
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.participation_ratio <= 1.0:
            raise ConfigError("participation_ratio must lie in (0, 1]")
        if self.rounds < 0 or self.local_epochs < 1 or self.clients < 1:
            raise ConfigError("rounds >= 0, local_epochs >= 1, clients >= 1 required")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_epoch and batch_size must be >= 1")
        if self.eta_min > self.eta_max:
            raise ConfigError("eta_min must not exceed eta_max")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.fedagg_update_rule not in (RULE_AGGREGATED, RULE_LOCAL):
            raise ConfigError(f"unknown fedagg_update_rule {self.fedagg_update_rule!r}")
        if self.model.kind not in (models.LINEAR_SOFTMAX, models.MLP_1HIDDEN):
            raise ConfigError(f"model kind {self.model.kind!r} not available in experiments")
        if self.partition.scheme not in (data_mod.IID, data_mod.PATHOLOGICAL, data_mod.DIRICHLET):
            raise ConfigError(f"unknown partition scheme {self.partition.scheme!r}")
        if self.dataset.kind not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        return self

    def effective_server_lr(self):
        return self.base_lr if self.server_lr < 0 else self.server_lr


@dataclass
class RoundRecord:
    round: int
    selected_clients: list
    global_loss: float
    test_accuracy: float
    test_loss: float
    solver_report: object = None      # meanfield.SolverReport for fedagg
    bound_report: object = None       # diagnostics.BoundReport for fedagg
    wall_time: float = 0.0


@dataclass
class ServerOptState:
    momentum: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim))


def sample_clients(n_clients, ratio, seed, round_index):
    """Sorted uniform sample (without replacement) of ceil(ratio * N) clients."""
    if not 0.0 < ratio <= 1.0:
        raise ContractError("ratio must lie in (0, 1]")
    count = int(math.ceil(ratio * n_clients))
    rng = np.random.default_rng([int(seed), 101, int(round_index)])
    return np.sort(rng.choice(n_clients, size=count, replace=False))


def aggregate(params, sizes):
    """Datasize-weighted average, accumulated in ascending client order."""
    if not params:
        raise ContractError("nothing to aggregate")
    if len(params) != len(sizes):
        raise ContractError("params and sizes must have equal length")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ContractError("client sizes must be positive")
    total = sizes.sum()
    out = np.zeros_like(np.asarray(params[0], dtype=np.float64))
    for w, s in zip(params, sizes):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != out.shape:
            raise ContractError("parameter vectors have mismatched lengths")
        out += (s / total) * w
    return out


def batch_stream(client_data, batch_size, seed, client_index, round_index):
    """Deterministic mini-batch generator for one client and round."""
    rng = np.random.default_rng([int(seed), 211, int(client_index), int(round_index)])
    m = client_data.size
    take = min(batch_size, m)
    while True:
        idx = rng.choice(m, size=take, replace=False)
        yield models.Batch(client_data.features[idx], client_data.labels[idx])


def _check_finite(w, what):
    if not np.all(np.isfinite(w)):
        raise NumericDivergenceError(f"{what} diverged to non-finite values")
    return w


def local_train_fedagg(client_data, w0, eta_row, rule, phi1, spec, batch_size,
                       steps_per_epoch=1, batches=None):
    """One client's local pass under a solved rate row.

    ``aggregated`` replays the solver trajectory (one step per epoch along
    phi1, exactly the solver's path); ``local`` takes ``steps_per_epoch``
    seeded mini-batch steps per epoch at that epoch's rate.
    """
    w = np.asarray(w0, dtype=np.float64).copy()
    if rule == RULE_AGGREGATED:
        for l, rate in enumerate(eta_row):
            w = w - rate * phi1[l]
        return _check_finite(w, "fedagg local model")
    if rule != RULE_LOCAL:
        raise ContractError(f"unknown fedagg update rule {rule!r}")
    for l, rate in enumerate(eta_row):
        for _ in range(steps_per_epoch):
            batch = next(batches)
            w = w - rate * models.gradient(spec, w, batch)
    return _check_finite(w, "fedagg local model")


def local_train_baseline(client_data, w0, optimizer, base_lr, num_epochs, spec,
                         batch_size, mu=0.0, steps_per_epoch=1, batches=None):
    """FedAvg / FedProx local pass: plain SGD, optionally with a prox pull to w0."""
    if optimizer not in (FEDAVG, FEDPROX):
        raise ContractError(f"unknown baseline optimizer {optimizer!r}")
    w0 = np.asarray(w0, dtype=np.float64)
    w = w0.copy()
    prox = mu if optimizer == FEDPROX else 0.0
    for _ in range(num_epochs * steps_per_epoch):
        batch = next(batches)
        g = models.gradient(spec, w, batch)
        if prox:
            g = g + prox * (w - w0)
        w = w - base_lr * g
    return _check_finite(w, f"{optimizer} local model")


def server_adaptive_update(global_w, pseudo_gradient, state, variant,
                           server_lr, beta1, beta2, tau):
    """FedOpt-family server step on the round's pseudo-gradient.

    ``pseudo_gradient`` is ``w_before - aggregate_after`` and is applied as a
    descent direction; no bias correction, matching the federated variants.
    """
    g = np.asarray(pseudo_gradient, dtype=np.float64)
    w = np.asarray(global_w, dtype=np.float64)
    if g.shape != w.shape or state.momentum.shape != w.shape:
        raise ContractError("server optimizer state does not match the model dimension")
    m = beta1 * state.momentum + (1.0 - beta1) * g
    sq = g * g
    if variant == "adam":
        v = beta2 * state.second_moment + (1.0 - beta2) * sq
    elif variant == "adagrad":
        v = state.second_moment + sq
    elif variant == "yogi":
        v = state.second_moment - (1.0 - beta2) * sq * np.sign(state.second_moment - sq)
    else:
        raise ContractError(f"unknown server optimizer variant {variant!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        new_w = w - server_lr * m / (np.sqrt(v) + tau)
    return _check_finite(new_w, "server-adaptive model"), ServerOptState(m, v)


def _per_sample_loss(spec, w, features, labels):
    s = models.scores(spec, w, features)
    shifted = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(features.shape[0]), labels]


def evaluate(spec, w, testset, eval_batch=4096):
    """Top-1 accuracy (argmax ties resolve to the lowest class) and mean loss."""
    if testset.size < 1:
        raise ContractError("test set is empty")
    correct = 0
    losses = []
    for start in range(0, testset.size, eval_batch):
        feats = testset.features[start:start + eval_batch]
        labs = testset.labels[start:start + eval_batch]
        s = models.scores(spec, w, feats)
        correct += int((s.argmax(axis=1) == labs).sum())
        losses.append(_per_sample_loss(spec, w, feats, labs))
    return correct / testset.size, float(np.concatenate(losses).mean())


def build_model_spec(config, dataset):
    if config.model.kind == models.LINEAR_SOFTMAX:
        return models.ModelSpec(models.LINEAR_SOFTMAX, dataset.input_dim, dataset.num_classes)
    return models.ModelSpec(models.MLP_1HIDDEN, dataset.input_dim, dataset.num_classes,
                            hidden_dim=config.model.hidden_dim)


def build_partition(config, dataset):
    part_cfg = config.partition
    if part_cfg.scheme == data_mod.IID:
        return data_mod.partition_iid(dataset, config.clients, config.seed)
    if part_cfg.scheme == data_mod.PATHOLOGICAL:
        return data_mod.partition_pathological(
            dataset, part_cfg.shards, part_cfg.shard_size,
            part_cfg.shards_per_client, config.clients, config.seed)
    return data_mod.partition_dirichlet(
        dataset, part_cfg.sigma, config.clients, part_cfg.equal_size, config.seed)


def _fedagg_round(config, spec, w, client_batches, selected, round_index,
                  solver_sink=None):
    """Solve the round's rate schedules, train the cohort, build diagnostics."""
    eta_sched, schedule, solver_report = meanfield.solve_round(
        w, client_batches, spec, config.local_epochs, config.alpha, config.epsilon,
        max_sweeps=config.max_sweeps, warmup_rate=config.base_lr,
        eta_min=config.eta_min, eta_max=config.eta_max, workers=config.workers)
    if solver_sink is not None:
        solver_sink(round_index, np.asarray(w, dtype=np.float64).copy(),
                    [int(i) for i in selected], eta_sched, schedule)
    trajectories = meanfield.forward_trajectories(
        w, eta_sched.eta, schedule.phi1, spec, client_batches, config.workers)

    uploads = []
    for slot, client in enumerate(selected):
        batches = batch_stream(client_batches[slot], config.batch_size,
                               config.seed, client, round_index)
        uploads.append(local_train_fedagg(
            client_batches[slot], w, eta_sched.eta[slot], config.fedagg_update_rule,
            schedule.phi1, spec, config.batch_size, config.steps_per_epoch, batches))

    cohort_union = models.Batch(
        np.concatenate([b.features for b in client_batches]),
        np.concatenate([b.labels for b in client_batches]))
    beta = diagnostics.beta_estimate(spec, cohort_union, seed=config.seed)
    bounds = diagnostics.estimate_bounds(trajectories, eta_sched, schedule.phi2, beta)
    drift = diagnostics.check_drift(trajectories, bounds, config.local_epochs)
    obj = diagnostics.objective_value(trajectories, eta_sched, schedule.phi2, config.alpha)
    const_eta = np.full_like(eta_sched.eta, config.base_lr)
    const_traj = meanfield.forward_trajectories(
        w, const_eta, schedule.phi1, spec, client_batches, config.workers)
    const_obj = diagnostics.objective_value(const_traj, const_eta, schedule.phi2,
                                            config.alpha)
    raw = eta_sched.raw_eta
    in_unit = (raw > 0.0) & (raw < 1.0)
    violations = [(int(i), int(l)) for i, l in zip(*np.nonzero(~in_unit))]
    partial = {
        "eta_in_unit_interval": not violations,
        "eta_violations": violations,
        "raw_unit_fraction": float(in_unit.mean()),
        "drift_ok": drift.all_ok,
        "drift_worst_ratio": drift.worst_ratio,
        "objective_value": obj,
        "constant_rate_objective": const_obj,
        "beta_is_probe_lower_bound": spec.kind != models.LINEAR_SOFTMAX,
    }
    return uploads, solver_report, bounds, partial


def run_experiment(config, dataset, testset):
    """Run the configured algorithm for ``config.rounds`` global rounds.

    Returns the complete list of per-round records; fully deterministic in
    the config seed (wall_time fields aside).
    """
    records, _, _ = run_experiment_detailed(config, dataset, testset)
    return records


def run_experiment_detailed(config, dataset, testset, solver_sink=None):
    """Like ``run_experiment`` but also returns the model spec and final parameters.

    ``solver_sink``, when given, receives ``(round, global_w, selected,
    eta_schedule, mean_field_schedule)`` after every fedagg solve; used by
    offline verification of the per-round fixed points.
    """
    config.validate()
    spec = build_model_spec(config, dataset)
    partition = build_partition(config, dataset)
    data_mod.validate_partition(partition, dataset)
    sizes = partition.sizes()
    union = np.concatenate([np.asarray(a) for a in partition.assignments])
    union_features = dataset.features[union]
    union_labels = dataset.labels[union]
    global_batch = models.Batch(union_features, union_labels)

    w = models.init_params(spec, config.seed)
    records = []
    opt_state = ServerOptState.zeros(spec.param_count)
    variant = SERVER_ADAPTIVE.get(config.algorithm)

    for t in range(config.rounds):
        start_time = time.perf_counter()
        selected = sample_clients(config.clients, config.participation_ratio,
                                  config.seed, t)
        client_batches = [
            models.Batch(dataset.features[partition.assignments[i]],
                         dataset.labels[partition.assignments[i]])
            for i in selected
        ]
        solver_report = None
        bound_partial = None
        bounds = None
        f_before = grad_norm_before = 0.0
        if config.algorithm == FEDAGG:
            f_before = models.loss(spec, w, global_batch)
            grad_norm_before = float(np.linalg.norm(
                models.gradient(spec, w, global_batch)))
            try:
                uploads, solver_report, bounds, bound_partial = _fedagg_round(
                    config, spec, w, client_batches, selected, t, solver_sink)
            except SolverConvergenceError as err:
                err.records = records
                raise
        else:
            uploads = []
            for slot, client in enumerate(selected):
                batches = batch_stream(client_batches[slot], config.batch_size,
                                       config.seed, client, t)
                optimizer = FEDPROX if config.algorithm == FEDPROX else FEDAVG
                uploads.append(local_train_baseline(
                    client_batches[slot], w, optimizer, config.base_lr,
                    config.local_epochs, spec, config.batch_size,
                    mu=config.mu, steps_per_epoch=config.steps_per_epoch,
                    batches=batches))

        aggregated = aggregate(uploads, [sizes[i] for i in selected])
        if variant is not None:
            pseudo_gradient = w - aggregated
            w, opt_state = server_adaptive_update(
                w, pseudo_gradient, opt_state, variant,
                config.effective_server_lr(), config.beta1, config.beta2, config.tau)
        else:
            w = aggregated
        try:
            _check_finite(w, "global model")
            accuracy, test_loss = evaluate(spec, w, testset)
            global_loss = models.loss(spec, w, global_batch)
        except NumericDivergenceError as err:
            err.records = records
            raise

        bound_report = None
        if bound_partial is not None:
            lhs, rhs, slack = diagnostics.descent_report(
                f_before, global_loss, grad_norm_before, bounds,
                config.local_epochs, len(selected))
            bound_report = diagnostics.BoundReport(
                descent_lhs=lhs, descent_rhs=rhs, descent_slack=slack,
                estimates=bounds, grad_norm_global=grad_norm_before,
                num_selected=len(selected), local_epochs=config.local_epochs,
                **bound_partial)
        records.append(RoundRecord(
            round=t, selected_clients=[int(i) for i in selected],
            global_loss=global_loss, test_accuracy=accuracy, test_loss=test_loss,
            solver_report=solver_report, bound_report=bound_report,
            wall_time=time.perf_counter() - start_time))
    return records, spec, w
