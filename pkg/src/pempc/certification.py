"""Offline certification: terminal-cost ingredients (Riccati solution,
control invariance, terminal decrease) and the constants that bound the
truncated controller's closed-loop behavior."""

import dataclasses
import json

import numpy as np
import scipy.linalg

from .polytope import (Polyhedron, intersect, is_subset, linear_program,
                       project, remove_redundant, set_equal, vertices)


def dare_residual(A, B, Q, R, P):
    """Norm of P - (A'PA - A'PB (R+B'PB)^{-1} B'PA + Q)."""
    W = R + B.T @ P @ B
    nxt = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(W, B.T @ P @ A) + Q
    return float(np.linalg.norm(P - nxt))


def dare(A, B, Q, R, tol=1e-10, max_iter=20000):
    """Discrete algebraic Riccati solution with certified fixed-point residual.

    A library solve seeds the value iteration; the loop then polishes until
    the fixed-point residual is at or below tol (usually zero extra steps).
    Falls back to pure value iteration from Q if the seed fails.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    try:
        P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    except Exception:
        P = np.array(Q)
    P = 0.5 * (P + P.T)
    for _ in range(max_iter):
        if dare_residual(A, B, Q, R, P) <= tol:
            return 0.5 * (P + P.T)
        W = R + B.T @ P @ B
        P = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(W, B.T @ P @ A) + Q
        P = 0.5 * (P + P.T)
    raise ArithmeticError(f"Riccati iteration did not reach residual {tol}")


def dare_gain(A, B, R, P):
    """LQR feedback K with u = K x for the value matrix P."""
    W = R + B.T @ P @ B
    return -np.linalg.solve(W, B.T @ P @ A)


def solve_dare(p):
    """Terminal value matrix for the algebraically eliminated system."""
    A_t, Q_t = p.eliminated_dynamics()
    return dare(A_t, p.B, Q_t, p.R)


# ---------------------------------------------------------------------------
# control invariance of the terminal set
# ---------------------------------------------------------------------------

def pre_set(omega, A_cl, B, U, context=None):
    """States that some admissible input steers into omega in one step.

    Pre(omega) = {x : exists u in U with A_cl x + B u in omega}; the input
    coordinates are removed by Fourier-Motzkin elimination.  An optional
    state-space `context` polyhedron is carried through the elimination so
    rows redundant relative to it are pruned early; its rows appear in the
    output, so the result is context cap Pre(omega).
    """
    nx, nu = A_cl.shape[0], B.shape[1]
    rows = [
        np.hstack([omega.H @ A_cl, omega.H @ B]),
        np.hstack([np.zeros((U.n_ineq, nx)), U.H]),
    ]
    rhs = [omega.b, U.b]
    if context is not None:
        rows.append(np.hstack([context.H, np.zeros((context.n_ineq, nu))]))
        rhs.append(context.b)
    return project(Polyhedron(np.vstack(rows), np.concatenate(rhs)),
                   list(range(nx)))


def maximal_control_invariant_set(p, max_iter=60, tol=1e-7):
    """Largest control invariant subset of X for the eliminated plant.

    Iterates Omega_{j+1} = X cap Pre(Omega_j) from Omega_0 = X until the
    set stops shrinking.  Returns (set, iterations).  The fixed point is
    control invariant by construction and contains every control invariant
    subset of X.
    """
    A_cl, _ = p.eliminated_dynamics()
    X = remove_redundant(p.X)
    omega = X
    for it in range(1, max_iter + 1):
        nxt = pre_set(omega, A_cl, p.B, p.U, context=X)
        if is_subset(omega, nxt, tol):
            return nxt, it
        omega = nxt
    raise ArithmeticError(
        f"invariant set iteration did not converge in {max_iter} steps")


def lqr_invariant_set(p, K=None, max_iter=500, tol=1e-9):
    """Maximal constraint-admissible invariant set under the terminal law.

    For the closed loop x+ = (A_t + B K) x the set

        O = {x : X.H A_K^s x <= X.b  and  U.H K A_K^s x <= U.b  for all s >= 0}

    is finitely determined when A_K is strictly stable.  Rows are added power
    by power until the next power is redundant; the result is invariant under
    the law u = K x with both state and input constraints satisfied, hence
    control invariant.  Returns (set, determination_index).
    """
    A_t, _ = p.eliminated_dynamics()
    if K is None:
        K = dare_gain(A_t, p.B, p.R, p.P)
    A_K = A_t + p.B @ K
    assert np.max(np.abs(np.linalg.eigvals(A_K))) < 1.0, \
        "terminal law must be strictly stabilizing"
    F = np.vstack([p.X.H, p.U.H @ K])
    g = np.concatenate([p.X.b, p.U.b])
    omega = remove_redundant(Polyhedron(F, g))
    M = np.array(A_K)
    for s in range(1, max_iter + 1):
        cand = Polyhedron(F @ M, g)
        if is_subset(omega, cand, tol=1e-9):
            return omega, s
        omega = remove_redundant(intersect(omega, cand))
        M = M @ A_K
    raise ArithmeticError(
        f"invariant set not finitely determined within {max_iter} powers")


def check_control_invariance(p, XN=None, tol=1e-7, combination_budget=300000,
                             samples=200, seed=0):
    """Certify that every vertex of XN admits an input keeping the successor
    in XN.  Sufficient and necessary: the pre-image of the convex set XN is
    convex, so it contains XN iff it contains its vertices.

    Vertex enumeration scans row combinations, which explodes with dimension.
    When C(rows, dim) exceeds combination_budget the check degrades to
    sampled evidence: vertices found by maximizing random directions over XN.
    The verdict is then "undecided" unless a violation shows up.

    Returns a dict with per-vertex worst slacks; 'invariant' is the verdict
    (True / False / "undecided").
    """
    XN = p.XN if XN is None else XN
    A_cl, _ = p.eliminated_dynamics()
    nu = p.n_u
    exhaustive = _n_combinations(XN.n_ineq, XN.dim) <= combination_budget
    if exhaustive:
        verts = vertices(XN)
    else:
        rng = np.random.default_rng(seed)
        found = {}
        for _ in range(samples):
            res = linear_program(-rng.standard_normal(XN.dim), XN.H, XN.b)
            if res.status == 'optimal':
                found[tuple(np.round(res.x, 9))] = res.x
        verts = list(found.values())
    margins = []
    for v in verts:
        # feasibility LP with slack: min s  s.t.  XN.H (A_cl v + B u) <= XN.b + s
        H = np.vstack([
            np.hstack([XN.H @ p.B, -np.ones((XN.n_ineq, 1))]),
            np.hstack([p.U.H, np.zeros((p.U.n_ineq, 1))]),
        ])
        b = np.concatenate([XN.b - XN.H @ (A_cl @ v), p.U.b])
        c = np.zeros(nu + 1)
        c[-1] = 1.0
        res = linear_program(c, H, b)
        margins.append(float(res.fun) if res.status == 'optimal' else np.inf)
    worst = max(margins) if margins else 0.0
    if worst > tol:
        verdict = False
    else:
        verdict = True if exhaustive else "undecided"
    return {
        "invariant": verdict,
        "exhaustive": exhaustive,
        "worst_violation": worst,
        "vertex_count": len(margins),
        "margins": margins,
    }


def _n_combinations(n, k):
    out = 1
    for i in range(k):
        out = out * max(n - i, 0) // (i + 1)
    return out


def shrink_terminal_set(p, tol=1e-4, max_iter=60):
    """Bisection on a uniform scaling s * X searching for an invariant box.

    Kept for diagnostics: for plants with a kinematic integrator row the
    successor of the scaled corner scales with s, so no s > 0 works and the
    bisection collapses to zero.  Returns (s, invariant_flag).
    """
    def scaled(s):
        return Polyhedron(p.X.H, s * p.X.b)

    def invariant(s):
        rep = check_control_invariance(_replace_xn(p, scaled(s)))
        return rep["invariant"] is True

    if invariant(1.0):
        return 1.0, True
    lo, hi = 0.0, 1.0
    while hi - lo > tol and max_iter:
        max_iter -= 1
        mid = 0.5 * (lo + hi)
        if mid > 0.0 and invariant(mid):
            lo = mid
        else:
            hi = mid
    return lo, lo > 0.0


def _replace_xn(p, XN):
    from dataclasses import replace
    return replace(p, XN=XN)


# ---------------------------------------------------------------------------
# certified constants
# ---------------------------------------------------------------------------
# sigma, gamma, kappa, eta, tau feed one scalar
#     c = eta * gamma * sqrt(sigma) * (1 + sqrt(kappa))
#         + tau * sigma * gamma^2 * (1 + sqrt(kappa))^2 / 2
# and the cycle budget must exceed m_bound = ceil(2 log c / log(1/kappa)) for
# the closed loop to admit the Lyapunov decrease J(x+) <= J(x) - alpha*l(x,u)
# with alpha = 1 - c * kappa^(m/2).


def compute_sigma(p):
    """Smallest sigma with [[B'QB, B'QC], [C'QB, C'QC]] <= sigma*diag(R, S).

    Exact: the largest generalized eigenvalue of the pair.  Bounds the state
    weight seen through one plant step by the input/algebraic weights.
    """
    B, C, Q = p.B, p.C, p.Q
    M = np.block([[B.T @ Q @ B, B.T @ Q @ C],
                  [C.T @ Q @ B, C.T @ Q @ C]])
    W = scipy.linalg.block_diag(p.R, p.S)
    eigs = scipy.linalg.eigh(0.5 * (M + M.T), 0.5 * (W + W.T),
                             eigvals_only=True)
    return float(max(eigs[-1], 0.0))


def _sample_in_box(P, rng):
    """Uniform draw from the bounding box of P, rejected against P."""
    verts = vertices(P)
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    while True:
        x = lo + (hi - lo) * rng.random(P.dim)
        if np.all(P.H @ x <= P.b + 1e-12):
            return x


def sample_feasible_states(p, sp=None, n=20, seed=0, max_tries=50000):
    """States in X from which the horizon problem is solvable."""
    from .qp import QpInfeasible, solve_stacked_exact
    from .problem import stack_problem

    sp = stack_problem(p) if sp is None else sp
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_tries):
        if len(out) == n:
            break
        x0 = _sample_in_box(p.X, rng)
        try:
            solve_stacked_exact(sp, x0)
        except QpInfeasible:
            continue
        out.append(x0)
    if len(out) < n:
        raise RuntimeError(f"only {len(out)}/{n} feasible states found")
    return out


def estimate_gamma(p, sp=None, samples=200, seed=0, safety=1.2):
    """gamma with F(y*(x)) + F*(lam*(x)) <= gamma^2 |x|_Q^2 on probe states.

    Probes are the vertices of X plus uniform draws from X; infeasible probes
    are skipped.  Sampled estimate, scaled by the safety factor.
    """
    from .qp import QpInfeasible, solve_stacked_exact
    from .problem import stack_problem

    sp = stack_problem(p) if sp is None else sp
    rng = np.random.default_rng(seed)
    probes = list(vertices(p.X))
    probes += [_sample_in_box(p.X, rng) for _ in range(samples)]

    ratio_max, used = 0.0, 0
    for x0 in probes:
        den = float(x0 @ p.Q @ x0)
        if den < 1e-12:
            continue
        try:
            y, lam, _ = solve_stacked_exact(sp, x0)
        except QpInfeasible:
            continue
        used += 1
        ratio_max = max(ratio_max, (sp.quad_form(y) + sp.conjugate(lam)) / den)
    if used == 0:
        raise RuntimeError("no feasible probe states for the gamma estimate")
    return {"gamma": float(safety * np.sqrt(ratio_max)),
            "ratio_max": float(ratio_max), "safety": safety,
            "n_feasible": used, "n_probes": len(probes), "method": "sampled"}


# -- fixed-cycle contraction -------------------------------------------------


def merit_weight(sp):
    """W with F(e_y) + F*(e_lam) = [e_y; e_lam]' W [e_y; e_lam] (dense)."""
    A = sp.A_matrix()
    Qm = sp.Q_matrix()
    Wl = 0.25 * A @ np.linalg.solve(Qm, A.T)
    return scipy.linalg.block_diag(Qm, 0.5 * (Wl + Wl.T))


def iterate_manifold_basis(sp):
    """Orthonormal basis of null(A) x R^n_dual.

    From the second cycle on, differences of primal iterates lie in null(A)
    because the coupling projection enforces A y = -h(x0) exactly; duals are
    unrestricted.  Contraction is certified on this subspace.
    """
    Z = scipy.linalg.null_space(sp.A_matrix())
    return scipy.linalg.block_diag(Z, np.eye(sp.n_dual))


def tracking_linear_parts(sp, fact):
    """(Pr, Dr): the linear maps r -> y and r -> delta of the coupled solve."""
    from .coupled import solve_tracking

    Pr = np.zeros((sp.n_y, sp.n_y))
    Dr = np.zeros((sp.n_dual, sp.n_y))
    x0 = np.zeros(sp.n_x)
    for j in range(sp.n_y):
        e = np.zeros(sp.n_y)
        e[j] = 1.0
        yj, dj = solve_tracking(fact, e, x0)
        Pr[:, j] = yj
        Dr[:, j] = dj
    return Pr, Dr


def _stage_rows(sp, k):
    if k == 0:
        return sp.stage0_rows()["A_in"]
    if k == sp.N:
        return sp.terminal_rows()["A_in"]
    return sp.interior_rows()["A_in"]


def _stage_sensitivity(sp, k, active):
    """d xi_k / d theta_k = -M for the fixed active rows (KKT block inverse)."""
    H = 4.0 * sp.sigma(k)
    if not active:
        return -np.linalg.inv(H)
    A_act = _stage_rows(sp, k)[list(active)]
    na = A_act.shape[0]
    K = np.block([[H, A_act.T], [A_act, np.zeros((na, na))]])
    try:
        Kinv = np.linalg.inv(K)
    except np.linalg.LinAlgError:
        Kinv = np.linalg.pinv(K)
    return -Kinv[: H.shape[0], : H.shape[0]]


def iteration_matrix(sp, fact, actives, parts=None):
    """Linear part of one cycle on (y, lam) for fixed stage active sets.

    theta = A' lam - 2 QQ y, stage solves apply the blockwise sensitivities,
    the coupled solve maps r = 2 xi - y through (Pr, Dr), and lam advances by
    delta.  Affine offsets (x0 terms, constraint bounds) drop out of the
    difference map.
    """
    Pr, Dr = tracking_linear_parts(sp, fact) if parts is None else parts
    n_y, n_d = sp.n_y, sp.n_dual
    Jth = np.hstack([-2.0 * sp.Q_matrix(), sp.A_matrix().T])
    Jxi = np.zeros_like(Jth)
    for k in range(sp.N + 1):
        sl = slice(sp.offsets[k], sp.offsets[k + 1])
        Jxi[sl] = _stage_sensitivity(sp, k, actives[k]) @ Jth[sl]
    Jr = 2.0 * Jxi - np.hstack([np.eye(n_y), np.zeros((n_y, n_d))])
    Jy = Pr @ Jr
    Jl = np.hstack([np.zeros((n_d, n_y)), np.eye(n_d)]) + Dr @ Jr
    return np.vstack([Jy, Jl])


def kappa_active_set_bound(sp, fact, actives, parts=None, basis=None, W=None,
                           steps=24, neutral_tol=1e-9):
    """Per-cycle merit contraction of one fixed-active-set cycle map.

    The one-step weighted operator norm of T is exactly 1 whenever a stage
    activates a successor-state row that duplicates the next stage's state row
    through the coupling equality: the dual solution is then a line, T fixes
    its direction, and transient non-normal directions touch the unit sphere.
    Iterate errors measured against the limit the cycle itself converges to
    live on the T-invariant complement of that neutral eigenspace, so the
    certified factor is the s-step envelope norm on the complement,
    kappa_A = ||(T|_R)^s||^(2/s), which tends to the squared spectral radius.
    Returns (kappa_A, one_step_norm_squared, n_neutral).
    """
    T = iteration_matrix(sp, fact, actives, parts)
    B = iterate_manifold_basis(sp) if basis is None else basis
    W = merit_weight(sp) if W is None else W
    Wv = B.T @ W @ B
    L = np.linalg.cholesky(0.5 * (Wv + Wv.T))
    # w = L' z turns the merit into the Euclidean norm: That = L' Tv inv(L')
    Tv = B.T @ T @ B
    That = L.T @ scipy.linalg.solve_triangular(L, Tv.T, lower=True).T
    one_step = float(np.linalg.norm(That, 2) ** 2)
    S, Z, k = scipy.linalg.schur(
        That, output="real",
        sort=lambda re, im: abs(complex(re, im) - 1.0) > neutral_tol)
    n_neutral = That.shape[0] - k
    if k == 0:
        return 0.0, one_step, n_neutral
    TR = S[:k, :k]
    env = float(np.linalg.norm(np.linalg.matrix_power(TR, steps), 2)
                ** (2.0 / steps))
    return env, one_step, n_neutral


def _plant_step(p, x, xi0):
    u = xi0[: p.n_u]
    z = xi0[p.n_u:]
    return p.A @ x + p.B @ u + p.C @ z


def estimate_kappa(p, sp=None, fact=None, starts=None, n_starts=6,
                   closed_loop_steps=8, m_bar_probe=8, polish=400,
                   envelope_steps=24, seed=0, safety=1.1):
    """Contraction factor of the inner cycle from two estimators.

    (i) visited active sets: every stage active-set combination seen along
    closed-loop probe runs gets the envelope bound of its affine cycle map;
    (ii) empirical: the worst consecutive merit ratio from the second cycle
    on, F(y - y*) + F*(lam - lam_lim), with lam_lim the dual point the run
    itself converges to (an optimal dual; the optimal dual set is a line
    whenever duplicated successor/state rows are active, so the dual the
    stacked KKT solve picks can differ by a constant neutral offset).
    The sampling safety factor shrinks the contraction margin: the reported
    empirical value is 1 - (1 - worst)/safety.  kappa is the max of both
    estimators; kappa >= 1 means no certificate.
    """
    from .coupled import factorize
    from .mpqp import implicit_store
    from .problem import stack_problem
    from .qp import QpInfeasible, solve_stacked_exact
    from .realtime import (ControllerConfig, cold_start, control_step,
                           inner_iteration)

    sp = stack_problem(p) if sp is None else sp
    fact = factorize(sp) if fact is None else fact
    store = implicit_store(p)
    if starts is None:
        starts = sample_feasible_states(p, sp, n=n_starts, seed=seed)

    parts = tracking_linear_parts(sp, fact)
    basis = iterate_manifold_basis(sp)
    W = merit_weight(sp)

    visited = set()
    ratio_max, n_ratios = 0.0, 0
    config = ControllerConfig(m_bar=m_bar_probe, map_fallback=True)
    for x0 in starts:
        # closed-loop probe: collect the active sets the controller visits
        x, state = np.array(x0), cold_start(sp)
        for _ in range(closed_loop_steps):
            try:
                u0, state, diag = control_step(sp, store, fact, config,
                                               state, x)
            except QpInfeasible:
                break
            visited.update(tuple(a) for a in diag["active_sets"])
            x = _plant_step(p, x, diag["states"][-1].xi[: p.n_u + p.n_z])
            if np.any(p.X.H @ x > p.X.b + 1e-9):
                break
        # open-loop polish at the start state for the empirical ratios
        y_opt, _, _ = solve_stacked_exact(sp, x0)
        state = cold_start(sp)
        trace = []
        for m in range(polish):
            state, actives = inner_iteration(sp, store, fact, state, x0,
                                             fallback=True)
            if m < 3 * m_bar_probe:
                visited.add(tuple(actives))
            if m < 60:
                trace.append((state.y.copy(), state.lam.copy()))
        lam_lim = state.lam
        merits = [sp.quad_form(y - y_opt) + sp.conjugate(l - lam_lim)
                  for y, l in trace]
        floor = 1e-10 * max(merits[0], 1.0)
        for i in range(1, len(merits) - 1):
            if merits[i] > floor:
                ratio_max = max(ratio_max, merits[i + 1] / merits[i])
                n_ratios += 1

    bound_max, one_step_max = 0.0, 0.0
    for combo in sorted(visited):
        env, one_step, _ = kappa_active_set_bound(
            sp, fact, combo, parts, basis, W, steps=envelope_steps)
        bound_max = max(bound_max, env)
        one_step_max = max(one_step_max, one_step)

    empirical_safe = 1.0 - (1.0 - ratio_max) / safety
    kappa = max(bound_max, empirical_safe)
    return {"kappa": float(kappa), "visited_bound": float(bound_max),
            "visited_one_step": float(one_step_max),
            "empirical": float(ratio_max),
            "empirical_safe": float(empirical_safe), "safety": safety,
            "envelope_steps": envelope_steps, "n_active_sets": len(visited),
            "n_runs": len(starts), "n_ratios": n_ratios,
            "method": "visited-active-sets+sampled"}


# -- cost-function regularity ------------------------------------------------


def _norm_q(p, v):
    return float(np.sqrt(max(v @ p.Q @ v, 0.0)))


def estimate_eta_tau(p, sp=None, n_starts=6, steps=10, perturbations=4,
                     pair_budget=400, holdout_pairs=10000, seed=0,
                     safety=1.2, perturb_scale=0.08):
    """(eta, tau) with |J(a) - J(b)| <= eta|a-b|_Q + (tau/2)|a-b|_Q^2.

    States are gathered along exact closed-loop trajectories plus feasible
    perturbations of them; the two constants come from the LP minimizing
    eta + tau subject to every sampled pair, then the safety factor.  A
    holdout set of fresh pairs from the same pool validates the fit.
    """
    from .problem import stack_problem
    from .qp import QpInfeasible, solve_stacked_exact

    sp = stack_problem(p) if sp is None else sp
    rng = np.random.default_rng(seed)
    starts = sample_feasible_states(p, sp, n=n_starts, seed=seed + 1)

    states, costs, traj_edges = [], [], []

    def try_add(x):
        try:
            y, _, J = solve_stacked_exact(sp, x)
        except QpInfeasible:
            return None
        states.append(np.array(x))
        costs.append(J)
        return y

    for x0 in starts:
        x = np.array(x0)
        prev = None
        for _ in range(steps):
            y = try_add(x)
            if y is None:
                break
            if prev is not None:
                traj_edges.append((len(states) - 2, len(states) - 1))
            prev = len(states) - 1
            x = _plant_step(p, x, sp.split(y)[0])
        base = len(states)
        for i in range(base - steps, base):
            if i < 0:
                continue
            for _ in range(perturbations):
                try_add(states[i] + perturb_scale * rng.standard_normal(p.n_x))

    n = len(states)
    if n < 2:
        raise RuntimeError("no feasible pairs for the eta/tau estimate")
    pairs = list(traj_edges)
    while len(pairs) < pair_budget:
        i, j = rng.integers(0, n, size=2)
        if i != j:
            pairs.append((int(i), int(j)))

    rows, rhs = [], []
    for i, j in pairs:
        d = _norm_q(p, states[i] - states[j])
        if d < 1e-12:
            continue
        rows.append([-d, -0.5 * d * d])
        rhs.append(-abs(costs[i] - costs[j]))
    rows.append([-1.0, 0.0])
    rhs.append(0.0)
    rows.append([0.0, -1.0])
    rhs.append(0.0)
    res = linear_program(np.array([1.0, 1.0]), np.array(rows), np.array(rhs))
    if res.status != "optimal":
        raise RuntimeError(f"eta/tau fit LP returned {res.status}")
    eta_fit, tau_fit = float(res.x[0]), float(res.x[1])
    eta, tau = safety * eta_fit, safety * tau_fit

    violations = 0
    for _ in range(holdout_pairs):
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        d = _norm_q(p, states[i] - states[j])
        if abs(costs[i] - costs[j]) > eta * d + 0.5 * tau * d * d + 1e-9:
            violations += 1
    return {"eta": eta, "tau": tau, "eta_fit": eta_fit, "tau_fit": tau_fit,
            "safety": safety, "n_states": n, "n_pairs": len(pairs),
            "holdout_pairs": holdout_pairs, "holdout_violations": violations,
            "method": "sampled-lp"}


# -- terminal cost decrease ---------------------------------------------------


def verify_terminal_decrease(p, P=None, K=None, combination_budget=300000,
                             samples=200, seed=0):
    """Margin of M(x) - l(x, Kx, z) - M(x+) >= 0 as a quadratic form on x.

    z is eliminated through the algebraic rows and x+ follows the closed
    loop A_t + B K.  The DARE pair makes the form identically zero, so its
    smallest eigenvalue is the certificate margin.  Whether Kx stays in U
    on X_N is a separate vertex check, reported alongside.
    """
    A_t, Q_t = p.eliminated_dynamics()
    if P is None:
        P = p.P
    if K is None:
        K = dare_gain(A_t, p.B, p.R, P)
    A_cl = A_t + p.B @ K
    delta = P - Q_t - K.T @ p.R @ K - A_cl.T @ P @ A_cl
    margin = float(np.linalg.eigvalsh(0.5 * (delta + delta.T))[0])

    XN = p.XN
    exhaustive = _n_combinations(XN.n_ineq, XN.dim) <= combination_budget
    if exhaustive:
        verts = vertices(XN)
    else:
        rng = np.random.default_rng(seed)
        found = {}
        for _ in range(samples):
            res = linear_program(-rng.standard_normal(XN.dim), XN.H, XN.b)
            if res.status == "optimal":
                found[tuple(np.round(res.x, 9))] = res.x
        verts = np.array(list(found.values()))
    worst = -np.inf
    for v in verts:
        worst = max(worst, float(np.max(p.U.H @ (K @ v) - p.U.b)))
    return {"margin": margin, "input_worst_violation": worst,
            "inputs_admissible": bool(worst <= 1e-9),
            "vertex_count": int(len(verts)), "exhaustive": exhaustive}


# -- certificate assembly ------------------------------------------------------


@dataclasses.dataclass
class CertificateReport:
    """Certified constants, the cycle-budget threshold, and the decrease rate.

    c is the bracket eta*gamma*sqrt(sigma)*(1+sqrt(kappa)) +
    tau*sigma*gamma^2*(1+sqrt(kappa))^2/2; the certificate holds for cycle
    budgets m_bar > m_bar_bound with Lyapunov rate alpha = 1 - c*kappa^(m_bar/2).
    """
    sigma: float
    gamma: float
    kappa: float
    eta: float
    tau: float
    c: float
    m_bar_bound: int
    m_bar: int
    alpha: float
    valid: bool
    methods: dict = dataclasses.field(default_factory=dict)
    samples: dict = dataclasses.field(default_factory=dict)
    safety: dict = dataclasses.field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def certificate_bracket(sigma, gamma, kappa, eta, tau):
    """c = eta*gamma*sqrt(sigma)*(1+sqrt(kappa)) + tau*sigma*gamma^2*(1+sqrt(kappa))^2/2."""
    w = 1.0 + np.sqrt(kappa)
    return float(eta * gamma * np.sqrt(sigma) * w
                 + 0.5 * tau * sigma * gamma ** 2 * w ** 2)


def certify(sigma, gamma, kappa, eta, tau, m_bar_requested,
            methods=None, samples=None, safety=None) -> CertificateReport:
    """Assemble the closed-loop certificate for the requested cycle budget."""
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa = {kappa}: no certificate outside (0, 1)")
    if min(sigma, gamma) <= 0.0 or min(eta, tau) < 0.0:
        raise ValueError("sigma, gamma must be positive; eta, tau nonnegative")
    c = certificate_bracket(sigma, gamma, kappa, eta, tau)
    ratio = 2.0 * np.log(c) / np.log(1.0 / kappa) if c > 0.0 else -np.inf
    m_bar_bound = int(np.ceil(ratio)) if np.isfinite(ratio) else 0
    m_bar = int(m_bar_requested)
    alpha = float(1.0 - c * kappa ** (m_bar / 2.0))
    valid = bool(m_bar > m_bar_bound and alpha > 0.0)
    return CertificateReport(
        sigma=float(sigma), gamma=float(gamma), kappa=float(kappa),
        eta=float(eta), tau=float(tau), c=c, m_bar_bound=m_bar_bound,
        m_bar=m_bar, alpha=alpha, valid=valid, methods=methods or {},
        samples=samples or {}, safety=safety or {})


def certify_problem(p, m_bar=None, seed=0, gamma_samples=200, kappa_starts=6,
                    eta_starts=6, include_terminal=True):
    """Run every estimator and assemble the certificate.

    Returns (CertificateReport, details) where details keeps the raw
    estimator reports, the terminal-decrease margin, and the terminal-set
    invariance verdict.
    """
    from .coupled import factorize
    from .problem import stack_problem

    sp = stack_problem(p)
    fact = factorize(sp)
    sigma = compute_sigma(p)
    gam = estimate_gamma(p, sp, samples=gamma_samples, seed=seed)
    kap = estimate_kappa(p, sp, fact, n_starts=kappa_starts, seed=seed)
    et = estimate_eta_tau(p, sp, n_starts=eta_starts, seed=seed)
    details = {"sigma": sigma, "gamma": gam, "kappa": kap, "eta_tau": et}
    if include_terminal:
        details["terminal_decrease"] = verify_terminal_decrease(p)
        details["terminal_invariance"] = check_control_invariance(p)

    if kap["kappa"] >= 1.0:
        raise ValueError(f"kappa = {kap['kappa']:.6f} >= 1: no certificate")
    probe = certify(sigma, gam["gamma"], kap["kappa"], et["eta"], et["tau"], 1)
    if m_bar is None:
        m_bar = max(probe.m_bar_bound + 1, 1)
    report = certify(
        sigma, gam["gamma"], kap["kappa"], et["eta"], et["tau"], m_bar,
        methods={"sigma": "exact", "gamma": gam["method"],
                 "kappa": kap["method"], "eta_tau": et["method"]},
        samples={"gamma_probes": gam["n_probes"],
                 "gamma_feasible": gam["n_feasible"],
                 "kappa_active_sets": kap["n_active_sets"],
                 "kappa_runs": kap["n_runs"], "kappa_ratios": kap["n_ratios"],
                 "eta_tau_states": et["n_states"],
                 "eta_tau_pairs": et["n_pairs"],
                 "eta_tau_holdout": et["holdout_pairs"]},
        safety={"gamma": gam["safety"], "kappa": kap["safety"],
                "eta_tau": et["safety"]})
    return report, details
