"""Dense QP oracles.

Two solvers behind one interface: exhaustive active-set enumeration with
infeasible-superset pruning (certified global optimum, deterministic
lexicographic tie-breaking) for small problems, and a primal active-set
method for the stacked horizon QP, whose inequality-row count puts it far
beyond enumeration.  Both certify their KKT residuals before returning.

Convention: min 0.5 x'Hx + f'x  s.t.  A_in x <= b_in, A_eq x = b_eq, with
stationarity H x + f + A_eq' lam + A_in' mu = 0 and mu >= 0.
"""

from dataclasses import dataclass

import numpy as np

from .polytope import linear_program


class QpInfeasible(Exception):
    pass


@dataclass
class DenseQp:
    H: np.ndarray
    f: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        self.A_in = (np.asarray(self.A_in, dtype=float).reshape(-1, n)
                     if np.size(self.A_in) else np.zeros((0, n)))
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        assert self.H.shape == (n, n)
        assert self.A_in.shape[0] == self.b_in.size
        assert self.A_eq.shape[0] == self.b_eq.size

    @property
    def n(self):
        return self.f.size


@dataclass
class QpSolution:
    x: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    active_set: tuple
    objective: float
    kkt_residual: float


def _kkt_residual(qp, x, lam, mu):
    r = qp.H @ x + qp.f + qp.A_eq.T @ lam + qp.A_in.T @ mu
    res = float(np.max(np.abs(r))) if r.size else 0.0
    if qp.A_eq.shape[0]:
        res = max(res, float(np.max(np.abs(qp.A_eq @ x - qp.b_eq))))
    if qp.A_in.shape[0]:
        slack = qp.A_in @ x - qp.b_in
        res = max(res, float(np.max(slack)))
        res = max(res, float(np.max(np.abs(mu * slack))))
        res = max(res, float(max(0.0, -np.min(mu))))
    return res


def _solution(qp, x, lam, mu, active):
    obj = float(0.5 * x @ qp.H @ x + qp.f @ x)
    return QpSolution(x, lam, mu, tuple(sorted(active)), obj,
                      _kkt_residual(qp, x, lam, mu))


def _kkt_solve(H, f_rhs, M, m_rhs):
    """Solve [[H, M'], [M, 0]] [x; nu] = [f_rhs; m_rhs]; None when singular."""
    n, m = H.shape[0], M.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = M.T
    K[n:, :n] = M
    rhs = np.concatenate([f_rhs, m_rhs])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None, None
    if not np.all(np.isfinite(sol)):
        return None, None
    return sol[:n], sol[n:]


# ---------------------------------------------------------------------------
# enumeration oracle
# ---------------------------------------------------------------------------

def solve_qp_enumeration(qp, feas_tol=1e-9, dual_tol=1e-9, budget=2 ** 20):
    """Global solve by enumerating candidate active sets.

    Breadth-first over cardinality; a candidate whose active rows admit no
    primal-feasible point prunes all of its supersets.  Among valid KKT
    points (all globally optimal for a PD Hessian) the lexicographically
    smallest active set wins, which makes the oracle deterministic.
    """
    n, m_in = qp.n, qp.A_in.shape[0]
    me = qp.A_eq.shape[0]
    rank_eq = int(np.linalg.matrix_rank(qp.A_eq)) if me else 0
    max_card = n - rank_eq

    root = linear_program(np.zeros(n), qp.A_in, qp.b_in,
                          qp.A_eq if me else None, qp.b_eq if me else None)
    if root.status == 'infeasible':
        raise QpInfeasible("no point satisfies the constraint rows")

    # per-child feasibility LPs only pay off once plain enumeration explodes
    use_lp_pruning = m_in > 14

    valid = []
    frontier = [()]
    examined = 0
    while frontier:
        next_frontier = []
        for S in frontier:
            examined += 1
            if examined > budget:
                raise ArithmeticError("active-set enumeration budget exceeded")
            rows = list(S)
            M = np.vstack([qp.A_eq, qp.A_in[rows]])
            rank_ok = M.shape[0] == 0 or np.linalg.matrix_rank(M) == M.shape[0]
            if rank_ok:
                x, nu = _kkt_solve(qp.H, -qp.f, M,
                                   np.concatenate([qp.b_eq, qp.b_in[rows]]))
                if x is not None:
                    mu_S = nu[me:]
                    inactive = [i for i in range(m_in) if i not in S]
                    ok_dual = not mu_S.size or np.min(mu_S) >= -dual_tol
                    ok_pri = True
                    if inactive:
                        viol = qp.A_in[inactive] @ x - qp.b_in[inactive]
                        ok_pri = np.max(viol) <= feas_tol * (1.0 + np.max(np.abs(qp.b_in[inactive])))
                    if ok_dual and ok_pri:
                        mu = np.zeros(m_in)
                        mu[rows] = np.maximum(mu_S, 0.0)
                        valid.append((tuple(rows), x, nu[:me], mu))
            if len(S) < max_card:
                start = S[-1] + 1 if S else 0
                for j in range(start, m_in):
                    child = S + (j,)
                    if use_lp_pruning:
                        # superset pruning: can all child rows be active at
                        # once while the rest stays feasible?
                        crows = list(child)
                        res = linear_program(
                            np.zeros(n), qp.A_in, qp.b_in,
                            np.vstack([qp.A_eq, qp.A_in[crows]]),
                            np.concatenate([qp.b_eq, qp.b_in[crows]]))
                        if res.status == 'infeasible':
                            continue
                    next_frontier.append(child)
        frontier = next_frontier

    if not valid:
        raise ArithmeticError("no nondegenerate optimal active set found")
    valid.sort(key=lambda t: t[0])
    S, x, lam, mu = valid[0]
    sol = _solution(qp, x, lam, mu, S)
    assert sol.kkt_residual <= 1e-8, f"oracle KKT residual {sol.kkt_residual:.2e}"
    return sol


# ---------------------------------------------------------------------------
# primal active-set method (stacked-scale problems)
# ---------------------------------------------------------------------------

def _feasible_start(qp, feas_tol):
    if qp.A_eq.shape[0]:
        x, _ = _kkt_solve(qp.H, -qp.f, qp.A_eq, qp.b_eq)
    else:
        x = np.linalg.solve(qp.H, -qp.f)
    if x is not None and (not qp.A_in.shape[0]
                          or np.max(qp.A_in @ x - qp.b_in) <= feas_tol):
        return x
    res = linear_program(np.zeros(qp.n), qp.A_in, qp.b_in,
                         qp.A_eq if qp.A_eq.shape[0] else None,
                         qp.b_eq if qp.A_eq.shape[0] else None)
    if res.status == 'infeasible':
        raise QpInfeasible("no point satisfies the constraint rows")
    return res.x


def solve_qp_active_set(qp, feas_tol=1e-9, dual_tol=1e-9, max_iter=2000):
    """Primal active-set method for strictly convex QPs.

    Deterministic: blocking rows and dropped rows are chosen by smallest
    index (Bland-style), which also guards against cycling on degenerate
    corners.  The returned solution carries a certified KKT residual.
    """
    n, m_in, me = qp.n, qp.A_in.shape[0], qp.A_eq.shape[0]
    x = _feasible_start(qp, feas_tol)

    W = []
    slack = qp.A_in @ x - qp.b_in if m_in else np.zeros(0)
    for i in np.nonzero(np.abs(slack) <= 1e-9)[0]:
        cand = np.vstack([qp.A_eq, qp.A_in[W + [int(i)]]])
        if np.linalg.matrix_rank(cand) == me + len(W) + 1:
            W.append(int(i))
            if me + len(W) == n:
                break

    for _ in range(max_iter):
        M = np.vstack([qp.A_eq, qp.A_in[W]])
        g = qp.H @ x + qp.f
        p, nu = _kkt_solve(qp.H, -g, M, np.zeros(me + len(W)))
        if p is None:
            # dependent working set (degenerate corner): drop its last row
            W.pop()
            continue
        if np.max(np.abs(p)) <= 1e-11 * (1.0 + np.max(np.abs(x))):
            mu_W = nu[me:]
            if not mu_W.size or np.min(mu_W) >= -dual_tol:
                mu = np.zeros(m_in)
                for idx, wi in enumerate(W):
                    mu[wi] = mu_W[idx]
                mu = np.maximum(mu, 0.0)
                sol = _solution(qp, x, nu[:me], mu, W)
                if sol.kkt_residual > 1e-8:
                    raise ArithmeticError(
                        f"active-set KKT residual {sol.kkt_residual:.2e}")
                return sol
            worst = [wi for idx, wi in enumerate(W) if mu_W[idx] < -dual_tol]
            W.remove(min(worst))
            continue
        alpha = 1.0
        block = -1
        for i in range(m_in):
            if i in W:
                continue
            ap = float(qp.A_in[i] @ p)
            if ap > 1e-12:
                ai = max((qp.b_in[i] - float(qp.A_in[i] @ x)) / ap, 0.0)
                # ascending scan: ties resolve to the smallest row index
                if ai < alpha - 1e-12:
                    alpha, block = ai, i
        x = x + alpha * p
        if block >= 0:
            W.append(block)
            W.sort()
    raise ArithmeticError("active-set iteration limit reached")


def solve_qp_dense(qp, method="auto"):
    """Ground-truth QP solve; enumeration when tractable, active-set otherwise."""
    if method == "auto":
        me = qp.A_eq.shape[0]
        rank_eq = int(np.linalg.matrix_rank(qp.A_eq)) if me else 0
        small = qp.A_in.shape[0] <= 24 and (qp.n - rank_eq) <= 8
        method = "enumeration" if small else "active-set"
    if method == "enumeration":
        return solve_qp_enumeration(qp)
    return solve_qp_active_set(qp)


# ---------------------------------------------------------------------------
# stacked horizon problem at a measured state
# ---------------------------------------------------------------------------

def stacked_qp_data(sp, x0):
    """DenseQp for the full horizon problem at x0 plus row bookkeeping.

    Equality rows are exactly the N coupling blocks (dynamics plus
    algebraic rows), so the equality duals are the coupling duals.
    Inequality rows are grouped by stage; `row_slices` maps stage k to its
    slice so active rows can be attributed to stages.
    """
    x0 = np.asarray(x0, dtype=float)
    n_y, N = sp.n_y, sp.N
    H = 2.0 * sp.Q_matrix()
    f = np.zeros(n_y)

    eq_rows = [sp.A_matrix()]
    eq_rhs = [sp.h_of(x0)]

    s0, si = sp.stage0_rows(), sp.interior_rows()
    sN = sp.terminal_rows()
    in_rows, in_rhs, row_slices = [], [], {}
    at = 0
    blk = np.zeros((s0["A_in"].shape[0], n_y))
    blk[:, sp.offsets[0]:sp.offsets[1]] = s0["A_in"]
    in_rows.append(blk)
    in_rhs.append(s0["b_in"] + s0["B_x0"] @ x0)
    row_slices[0] = slice(at, at + blk.shape[0])
    at += blk.shape[0]
    for k in range(1, N):
        blk = np.zeros((si["A_in"].shape[0], n_y))
        blk[:, sp.offsets[k]:sp.offsets[k + 1]] = si["A_in"]
        in_rows.append(blk)
        in_rhs.append(si["b_in"])
        row_slices[k] = slice(at, at + blk.shape[0])
        at += blk.shape[0]
    blk = np.zeros((sN["A_in"].shape[0], n_y))
    blk[:, sp.offsets[N]:sp.offsets[N + 1]] = sN["A_in"]
    in_rows.append(blk)
    in_rhs.append(sN["b_in"])
    row_slices[N] = slice(at, at + blk.shape[0])

    qp = DenseQp(H, f, np.vstack(in_rows), np.concatenate(in_rhs),
                 np.vstack(eq_rows), np.concatenate(eq_rhs))
    return qp, row_slices


def solve_stacked_exact(sp, x0, method="auto"):
    """Exact primal/dual horizon solution at x0.

    Returns (y*, coupling duals lam*, J(x0)) where J includes the constant
    x0'Qx0 stage-cost term.  Raises QpInfeasible outside the feasible domain.
    """
    x0 = np.asarray(x0, dtype=float)
    qp, _ = stacked_qp_data(sp, x0)
    sol = solve_qp_dense(qp, method=method)
    lam = sol.eq_duals[:sp.n_dual]
    J = sp.quad_form(sol.x) + float(x0 @ sp.problem.Q @ x0)
    return sol.x, lam, J


def stacked_solution_details(sp, x0, method="auto"):
    """Like solve_stacked_exact but keeps the QpSolution and row map."""
    x0 = np.asarray(x0, dtype=float)
    qp, row_slices = stacked_qp_data(sp, x0)
    sol = solve_qp_dense(qp, method=method)
    J = sp.quad_form(sol.x) + float(x0 @ sp.problem.Q @ x0)
    return sol, row_slices, J
