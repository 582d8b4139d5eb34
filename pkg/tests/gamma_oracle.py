"""Independent dense iteration of the per-round schedule mapping (d = 1).

Used only by tests.  Deliberately avoids the package's solver machinery:
clients are scalar quadratics F_i(w) = 0.5*(w - a_i)^2, the per-client rate
row comes from dynamic programming with a quadratic value function (a
Riccati-style backward pass plus a feedback rollout), and the outer loop is
plain Python floats.  The package solves the same per-client program as a
box-constrained linear system, so agreement is a genuine dual-route check.
"""


def riccati_rates(w0, phi1, phi2, alpha):
    """Optimal rate row for one client via backward value recursion.

    Cost: sum_l alpha*eta_l^2 + (1-alpha)*(w_l - phi2_l)^2 subject to
    w_{l+1} = w_l - eta_l * phi1_l, terminal rate fixed at zero.
    """
    num_epochs = len(phi1)
    p_next = 1.0 - alpha
    q_next = -2.0 * (1.0 - alpha) * phi2[num_epochs]
    coeffs = [None] * num_epochs
    for l in range(num_epochs - 1, -1, -1):
        denom = 2.0 * (alpha + p_next * phi1[l] * phi1[l])
        a = 2.0 * p_next * phi1[l] / denom          # eta_l(w) = a*w + b
        b = q_next * phi1[l] / denom
        coeffs[l] = (a, b)
        c1 = 1.0 - a * phi1[l]                      # next state: c1*w + c0
        c0 = -b * phi1[l]
        p_l = alpha * a * a + (1.0 - alpha) + p_next * c1 * c1
        q_l = (2.0 * alpha * a * b - 2.0 * (1.0 - alpha) * phi2[l]
               + 2.0 * p_next * c1 * c0 + q_next * c1)
        p_next, q_next = p_l, q_l
    etas = []
    w = w0
    for l in range(num_epochs):
        a, b = coeffs[l]
        eta = a * w + b
        etas.append(eta)
        w = w - eta * phi1[l]
    return etas


def iterate_mapping(w_bar, targets, num_epochs, alpha, epsilon, max_sweeps,
                    warm_rate):
    """Iterate the schedule mapping to a fixed point; returns (etas, phi1, phi2, sweeps).

    The returned schedules are the ones the final rate row was solved
    against, mirroring the solver's return convention.
    """
    n = len(targets)
    w = w_bar
    phi1 = []
    phi2 = [w]
    for _ in range(num_epochs):
        g = sum(w - a for a in targets) / n
        phi1.append(g)
        w = w - warm_rate * g
        phi2.append(w)
    for sweep in range(1, max_sweeps + 1):
        etas = riccati_rates(w_bar, phi1, phi2, alpha)
        ws = [w_bar]
        for l in range(num_epochs):
            ws.append(ws[-1] - etas[l] * phi1[l])
        new_phi1 = [sum(ws[l] - a for a in targets) / n for l in range(num_epochs)]
        new_phi2 = list(ws)
        e1 = max(abs(x - y) for x, y in zip(new_phi1, phi1))
        e2 = max(abs(x - y) for x, y in zip(new_phi2, phi2))
        if e1 <= epsilon and e2 <= epsilon:
            return etas, phi1, phi2, sweep
        phi1, phi2 = new_phi1, new_phi2
    raise RuntimeError(f"oracle failed to converge in {max_sweeps} sweeps")
