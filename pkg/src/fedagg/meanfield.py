"""Per-round adaptive learning-rate schedules via mean-field fixed-point iteration.

Every global round, all selected clients share two schedules: phi1 (the
population-average gradient at each local epoch) and phi2 (the population-
average parameter).  Given frozen schedules, each client's optimal rate row
solves a small convex quadratic program: the trajectory constraint is
``w[l+1] = w[l] - eta[l] * phi1[l]`` and the cost per epoch is
``alpha * eta^2 + (1 - alpha) * ||w - phi2||^2``.  The outer loop re-averages
trajectories into new schedules and stops when both schedule residuals fall
below ``epsilon`` (L-inf over epochs and coordinates; a signed sum would let
per-epoch differences cancel and signal convergence falsely).

Two independent routes to the rate row are exposed:

* ``backward_eta`` solves the scalar linear equation of the backward
  recursion epoch by epoch (the r = l term is moved to the left-hand side,
  so the denominator ``1 + c*(L-l)*||phi1_l||^2`` is always >= 1);
* ``costate_eta`` runs the adjoint recursion
  ``lam(l) = lam(l+1) + 2*(1-alpha)*(w_l - phi2_l)`` from the boundary
  ``lam(L) = 2*(1-alpha)*(w_L - phi2_L)`` and reads off
  ``eta_l = phi1_l . lam(l+1) / (2*alpha)``.

On a self-consistent trajectory the two coincide; the solver returns states
where they agree to machine precision, which the test suite exploits.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import ContractError, NumericDivergenceError, SolverConvergenceError


@dataclass
class MeanFieldSchedule:
    phi1: list  # L arrays of length d: mean gradient per epoch
    phi2: list  # L+1 arrays of length d: mean parameter per epoch

    @property
    def num_epochs(self):
        return len(self.phi1)


@dataclass
class EtaSchedule:
    eta: np.ndarray       # (N, L) clamped to [eta_min, eta_max]
    raw_eta: np.ndarray   # (N, L) pre-clamp values
    eta_min: float
    eta_max: float


@dataclass
class ClientTrajectory:
    w: list      # L+1 parameter vectors, w[0] is the round's global parameter
    grad: list   # L gradients, grad[l] evaluated at w[l] on the client's data


@dataclass
class SolverReport:
    sweeps: int
    residual_phi1: float
    residual_phi2: float
    clamp_events: int
    clamp_locations: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self):
        return {
            "sweeps": self.sweeps,
            "residual_phi1": self.residual_phi1,
            "residual_phi2": self.residual_phi2,
            "clamp_events": self.clamp_events,
            "clamp_locations": [list(map(int, loc)) for loc in self.clamp_locations[:64]],
            "converged": self.converged,
        }


def _map_ordered(fn, items, workers):
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def forward_trajectories(global_w, eta, phi1, spec, client_batches, workers=None):
    """Roll every client forward under the aggregated rule and record gradients.

    ``w[l+1] = w[l] - eta[i][l] * phi1[l]`` exactly; ``grad[l]`` is the
    client's full-batch gradient at ``w[l]``.
    """
    eta = np.asarray(eta, dtype=np.float64)
    n_clients = len(client_batches)
    L = len(phi1)
    if eta.shape != (n_clients, L):
        raise ContractError(f"eta shape {eta.shape} does not match ({n_clients}, {L})")

    def roll(i):
        w = np.asarray(global_w, dtype=np.float64).copy()
        ws = [w]
        grads = []
        for l in range(L):
            g = models.gradient(spec, ws[l], client_batches[i])
            grads.append(g)
            nxt = ws[l] - eta[i, l] * phi1[l]
            if not np.all(np.isfinite(nxt)):
                raise NumericDivergenceError(
                    f"non-finite trajectory for client {i} at epoch {l + 1}")
            ws.append(nxt)
        return ClientTrajectory(ws, grads)

    return _map_ordered(roll, list(range(n_clients)), workers)


def backward_eta(traj, phi1, phi2, alpha, eta_min=-np.inf, eta_max=np.inf):
    """Rate row from the backward recursion on a given trajectory.

    Returns ``(raw, clamped)``.  Epochs are processed from L-1 down to 0;
    the cascade for r > l uses the already-clamped values, matching the
    dynamics that clamped rates actually induce.
    """
    L = len(phi1)
    c = (1.0 - alpha) / alpha
    raw = np.zeros(L)
    clamped = np.zeros(L)
    phi2_tail = np.zeros_like(phi2[0])
    eta_phi_tail = np.zeros_like(phi2[0])   # sum_{r>l} (L-r) * eta_r * phi1_r
    for l in range(L - 1, -1, -1):
        phi2_tail = phi2_tail + phi2[l + 1]
        target = (L - l) * traj.w[l] - eta_phi_tail - phi2_tail
        denom = 1.0 + c * (L - l) * float(phi1[l] @ phi1[l])
        raw[l] = c * float(phi1[l] @ target) / denom
        clamped[l] = min(max(raw[l], eta_min), eta_max)
        eta_phi_tail = eta_phi_tail + (L - l) * clamped[l] * phi1[l]
    return raw, clamped


def costate_eta(traj, phi1, phi2, alpha):
    """Rate row via the adjoint recursion; an independent check of backward_eta."""
    L = len(phi1)
    lam = 2.0 * (1.0 - alpha) * (traj.w[L] - phi2[L])
    eta = np.zeros(L)
    for l in range(L - 1, -1, -1):
        eta[l] = float(phi1[l] @ lam) / (2.0 * alpha)
        lam = lam + 2.0 * (1.0 - alpha) * (traj.w[l] - phi2[l])
    return eta


def update_estimators(trajectories):
    """Average trajectories into fresh schedules (ascending client order)."""
    if not trajectories:
        raise ContractError("need at least one trajectory")
    L = len(trajectories[0].grad)
    phi1 = [np.mean([t.grad[l] for t in trajectories], axis=0) for l in range(L)]
    phi2 = [np.mean([t.w[l] for t in trajectories], axis=0) for l in range(L + 1)]
    return MeanFieldSchedule(phi1, phi2)


def residual(old, new):
    """L-inf schedule residuals (eps1 for phi1, eps2 for phi2)."""
    if old.num_epochs != new.num_epochs:
        raise ContractError("schedule shapes do not match")
    e1 = max(float(np.max(np.abs(n - o))) for n, o in zip(new.phi1, old.phi1))
    e2 = max(float(np.max(np.abs(n - o))) for n, o in zip(new.phi2, old.phi2))
    return e1, e2


def _stationary_system(global_w, phi1, phi2, alpha):
    """Linear stationarity system A eta = b of the per-client rate program.

    A = I + c * (M o G) with M[l, r] = min(L-l, L-r) and G the phi1 Gram
    matrix; A is symmetric positive definite, so the free system is always
    solvable.
    """
    L = len(phi1)
    c = (1.0 - alpha) / alpha
    gram = np.empty((L, L))
    for a in range(L):
        for b_ in range(a, L):
            gram[a, b_] = gram[b_, a] = float(phi1[a] @ phi1[b_])
    steps = np.arange(L, 0, -1, dtype=np.float64)      # L - l
    m = np.minimum.outer(steps, steps)
    a_mat = np.eye(L) + c * m * gram
    b_vec = np.empty(L)
    phi2_tail = np.zeros_like(phi2[0])
    for l in range(L - 1, -1, -1):
        phi2_tail = phi2_tail + phi2[l + 1]
        b_vec[l] = c * ((L - l) * float(phi1[l] @ global_w) - float(phi1[l] @ phi2_tail))
    return a_mat, b_vec


def _control_solve(global_w, phi1, phi2, alpha, eta_min, eta_max):
    """Exact box-constrained solution of one client's rate program.

    Active-set iteration on the KKT conditions of the convex QP: free
    coordinates satisfy stationarity, bound coordinates carry the correct
    multiplier sign.  Returns ``(raw, clamped)`` where raw is the
    unconstrained coordinate value given the clamped others (what the
    backward recursion reproduces on the induced trajectory).
    """
    L = len(phi1)
    a_mat, b_vec = _stationary_system(global_w, phi1, phi2, alpha)
    eta = np.clip(np.linalg.solve(a_mat, b_vec), eta_min, eta_max)
    at_lower = np.zeros(L, dtype=bool)
    at_upper = np.zeros(L, dtype=bool)
    for _ in range(8 * L + 16):
        free = ~(at_lower | at_upper)
        eta = np.where(at_lower, eta_min, np.where(at_upper, eta_max, eta))
        if free.any():
            rhs = b_vec[free] - a_mat[np.ix_(free, ~free)] @ eta[~free]
            eta[free] = np.linalg.solve(a_mat[np.ix_(free, free)], rhs)
        grad_j = a_mat @ eta - b_vec      # proportional to the objective gradient
        next_lower = at_lower.copy()
        next_upper = at_upper.copy()
        next_lower[free & (eta < eta_min)] = True
        next_upper[free & (eta > eta_max)] = True
        release_low = at_lower & (grad_j < 0.0)
        release_up = at_upper & (grad_j > 0.0)
        next_lower[release_low] = False
        next_upper[release_up] = False
        if (next_lower == at_lower).all() and (next_upper == at_upper).all() \
                and not (free & ((eta < eta_min) | (eta > eta_max))).any():
            break
        at_lower, at_upper = next_lower, next_upper
    clamped = np.clip(eta, eta_min, eta_max)
    raw = (b_vec - a_mat @ clamped) / np.diag(a_mat) + clamped
    return raw, clamped


def warm_start(global_w, spec, client_batches, num_epochs, rate, workers=None):
    """Initial schedules from one shared pass of aggregated-gradient descent."""
    w = np.asarray(global_w, dtype=np.float64).copy()
    phi1 = []
    phi2 = [w.copy()]
    for _ in range(num_epochs):
        grads = _map_ordered(
            lambda b: models.gradient(spec, w, b), list(client_batches), workers)
        g = np.mean(grads, axis=0)
        phi1.append(g)
        w = w - rate * g
        phi2.append(w.copy())
    return MeanFieldSchedule(phi1, phi2)


def solve_round(global_w, client_batches, spec, num_epochs, alpha, epsilon,
                max_sweeps=100, warmup_rate=0.01, eta_min=0.0, eta_max=1.0,
                workers=None):
    """Fixed point of the schedule mapping for one global round.

    Returns ``(EtaSchedule, MeanFieldSchedule, SolverReport)``.  The returned
    schedules are the ones the rate rows were solved against, so replaying
    ``forward_trajectories`` with the returned values and re-averaging moves
    the schedules by at most ``epsilon`` (the converged residual).
    """
    if num_epochs < 1:
        raise ContractError("num_epochs must be >= 1")
    if not 0.0 < alpha <= 1.0:
        raise ContractError("alpha must lie in (0, 1]")
    if epsilon <= 0.0:
        raise ContractError("epsilon must be > 0")
    if eta_min > eta_max:
        raise ContractError("eta_min must not exceed eta_max")
    n_clients = len(client_batches)
    if n_clients < 1:
        raise ContractError("need at least one client")
    global_w = np.asarray(global_w, dtype=np.float64)

    schedule = warm_start(global_w, spec, client_batches, num_epochs, warmup_rate, workers)
    report = SolverReport(0, np.inf, np.inf, 0)
    for sweep in range(1, max_sweeps + 1):
        # All clients start the round at the same global parameter, so one
        # control solve covers every client; rows of the schedule coincide.
        raw_row, clamped_row = _control_solve(
            global_w, schedule.phi1, schedule.phi2, alpha, eta_min, eta_max)
        raw = np.tile(raw_row, (n_clients, 1))
        clamped = np.tile(clamped_row, (n_clients, 1))
        trajectories = forward_trajectories(
            global_w, clamped, schedule.phi1, spec, client_batches, workers)
        new_schedule = update_estimators(trajectories)
        e1, e2 = residual(schedule, new_schedule)
        outside = (raw < eta_min) | (raw > eta_max)
        locations = [(int(i), int(l)) for i, l in zip(*np.nonzero(outside))]
        report = SolverReport(sweep, e1, e2, int(outside.sum()), locations)
        if e1 <= epsilon and e2 <= epsilon:
            report.converged = True
            eta_sched = EtaSchedule(clamped, raw, float(eta_min), float(eta_max))
            return eta_sched, schedule, report
        schedule = new_schedule
    raise SolverConvergenceError(
        f"no fixed point after {max_sweeps} sweeps "
        f"(residuals {report.residual_phi1:.3g}, {report.residual_phi2:.3g} > {epsilon:g})",
        report)
