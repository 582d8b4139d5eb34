"""Runtime verification of the theoretical bounds.

Norm constants are measured per round (the theory never supplies numeric
values): P bounds gradients, Q parameters, U the deviation from the mean
parameter, delta_min/delta_max the clamped rate range.  The client-drift
inequality ``||w_{i,l} - w_bar|| <= l * P * delta_max`` follows from the
aggregated update rule by the triangle inequality, so a violation flags an
implementation bug rather than a theory gap.  The per-round descent bound
is report-only: its Lipschitz constant is an estimate, so the inequality is
tabulated as slack, never asserted.
"""

from dataclasses import dataclass

import numpy as np

from . import models
from .errors import ContractError

DRIFT_SLACK = 1e-9   # relative float roundoff allowance on an exact inequality


@dataclass
class BoundEstimates:
    P: float           # max ||grad F_i(w_{i,l})|| over clients and epochs
    Q: float           # max ||w_{i,l}||
    U: float           # max ||w_{i,l} - phi2_l||
    beta: float        # gradient-Lipschitz constant (estimate)
    delta_max: float   # max clamped rate this round
    delta_min: float   # min clamped rate this round

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in
                ("P", "Q", "U", "beta", "delta_max", "delta_min")}


@dataclass
class DriftCheck:
    per_client_ok: list
    worst_ratio: float

    @property
    def all_ok(self):
        return all(self.per_client_ok)


@dataclass
class BoundReport:
    eta_in_unit_interval: bool
    eta_violations: list
    raw_unit_fraction: float
    drift_ok: bool
    drift_worst_ratio: float
    descent_lhs: float
    descent_rhs: float
    descent_slack: float
    objective_value: float
    constant_rate_objective: float
    beta_is_probe_lower_bound: bool = False
    estimates: BoundEstimates = None
    grad_norm_global: float = 0.0
    num_selected: int = 0
    local_epochs: int = 0

    def to_dict(self):
        return {
            "eta_in_unit_interval": self.eta_in_unit_interval,
            "eta_violations": [list(map(int, v)) for v in self.eta_violations[:64]],
            "raw_unit_fraction": self.raw_unit_fraction,
            "drift_ok": self.drift_ok,
            "drift_worst_ratio": self.drift_worst_ratio,
            "descent_lhs": self.descent_lhs,
            "descent_rhs": self.descent_rhs,
            "descent_slack": self.descent_slack,
            "objective_value": self.objective_value,
            "constant_rate_objective": self.constant_rate_objective,
            "beta_is_probe_lower_bound": self.beta_is_probe_lower_bound,
            "estimates": self.estimates.to_dict() if self.estimates else None,
            "grad_norm_global": self.grad_norm_global,
            "num_selected": self.num_selected,
            "local_epochs": self.local_epochs,
        }


def estimate_bounds(trajectories, eta, phi2, beta=0.0):
    """Measured round constants (L2 norms, exact maxima over clients/epochs)."""
    if not trajectories:
        raise ContractError("need at least one trajectory")
    p = max(float(np.linalg.norm(g)) for t in trajectories for g in t.grad)
    q = max(float(np.linalg.norm(w)) for t in trajectories for w in t.w)
    u = max(float(np.linalg.norm(t.w[l] - phi2[l]))
            for t in trajectories for l in range(len(t.w)))
    eta_mat = np.asarray(eta.eta if hasattr(eta, "eta") else eta, dtype=np.float64)
    return BoundEstimates(p, q, u, float(beta),
                          float(eta_mat.max()), float(eta_mat.min()))


def _top_gram_eigenvalue(aug, tol=1e-12, max_iter=2000):
    """lambda_max(aug' aug / m) by power iteration on the implicit operator.

    Avoids forming the Gram matrix for wide feature sets; deterministic
    start, converged to relative tolerance.
    """
    m = aug.shape[0]
    v = np.ones(aug.shape[1]) / np.sqrt(aug.shape[1])
    lam = 0.0
    for _ in range(max_iter):
        u = aug.T @ (aug @ v) / m
        norm = float(np.linalg.norm(u))
        if norm == 0.0:
            return 0.0
        v_next = u / norm
        if abs(norm - lam) <= tol * max(norm, 1.0):
            return norm
        lam, v = norm, v_next
    return lam


def beta_estimate(spec, batch, probe_pairs=32, seed=0):
    """Gradient-Lipschitz constant of the mean loss.

    Linear softmax: analytic upper bound ``(K-1)/K * lambda_max(X~' X~ / m)``
    over bias-augmented features (the softmax Hessian factor is bounded by
    (K-1)/K; for K = 2 the sharper 1/4 would also be valid).  Other models:
    max finite ratio ||grad(w) - grad(w')|| / ||w - w'|| over seeded probe
    pairs, which is only a lower estimate.
    """
    if probe_pairs < 1:
        raise ContractError("probe_pairs must be >= 1")
    if spec.kind == models.LINEAR_SOFTMAX:
        aug = np.hstack([batch.features, np.ones((batch.size, 1))])
        if aug.shape[1] <= 256:
            gram = aug.T @ aug / batch.size
            lam_max = float(np.linalg.eigvalsh(gram)[-1])
        else:
            lam_max = _top_gram_eigenvalue(aug)
        k = spec.num_classes
        return (k - 1) / k * lam_max + 1e-12
    rng = np.random.default_rng([int(seed), 41])
    best = 0.0
    for _ in range(probe_pairs):
        w = rng.normal(0.0, 1.0, spec.param_count)
        w2 = w + rng.normal(0.0, 0.1, spec.param_count)
        gap = float(np.linalg.norm(w - w2))
        if gap == 0.0:
            continue
        g1 = models.gradient(spec, w, batch)
        g2 = models.gradient(spec, w2, batch)
        best = max(best, float(np.linalg.norm(g1 - g2)) / gap)
    return best


def check_drift(trajectories, bounds, num_epochs):
    """Assert ``||w_{i,l} - w_bar|| <= l * P * delta_max`` per client and epoch."""
    flags = []
    worst = 0.0
    cap = num_epochs * bounds.P * bounds.delta_max
    for t in trajectories:
        start = t.w[0]
        ok = True
        for l in range(len(t.w)):
            drift = float(np.linalg.norm(t.w[l] - start))
            limit = min(l * bounds.P * bounds.delta_max, cap)
            if limit > 0.0:
                worst = max(worst, drift / limit)
            if drift > limit * (1.0 + DRIFT_SLACK) + 1e-300:
                ok = False
        flags.append(ok)
    return DriftCheck(flags, worst)


def descent_report(f_before, f_after, grad_norm_global, bounds, num_epochs, n_clients):
    """Per-round loss-change bound: LHS, closed-form RHS and their slack."""
    L = float(num_epochs)
    g = float(grad_norm_global)
    rhs = ((bounds.beta * L**2 * bounds.delta_max**2 - L * bounds.delta_min) * g**2
           + L**2 * bounds.P * bounds.beta * bounds.delta_min * bounds.delta_max * g
           + bounds.beta * L**4 * n_clients * bounds.P**2 * bounds.delta_max**4)
    lhs = float(f_after) - float(f_before)
    return lhs, rhs, rhs - lhs


def objective_value(trajectories, eta, phi2, alpha):
    """Round contribution of the penalized control objective, summed over clients.

    ``sum_i [ alpha * sum_l eta_{i,l}^2 + (1-alpha) * sum_l ||w_{i,l} - phi2_l||^2 ]``
    with the rate term over epochs 0..L-1 (the boundary rate is zero) and the
    deviation term over epochs 0..L.
    """
    eta_mat = np.asarray(eta.eta if hasattr(eta, "eta") else eta, dtype=np.float64)
    total = 0.0
    for i, t in enumerate(trajectories):
        total += alpha * float(np.sum(eta_mat[i] ** 2))
        total += (1.0 - alpha) * sum(
            float(np.sum((t.w[l] - phi2[l]) ** 2)) for l in range(len(t.w)))
    return total
