"""Polyhedra in halfspace form and a small dense linear-programming core.

Everything downstream (critical-region construction, redundancy removal,
Chebyshev filtering, feasibility oracles) reduces to small dense LPs, so the
solver here is deliberately self-contained: a two-phase primal simplex with
Bland's rule for anti-cycling.  Determinism matters more than speed at these
problem sizes.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

TOL = 1e-9


@dataclass
class LpResult:
    status: str  # 'optimal' | 'infeasible' | 'unbounded'
    x: np.ndarray | None = None
    fun: float | None = None


def _run_simplex(T, basis, cost):
    """Bland-rule primal simplex on a canonical tableau.

    T is (m, n+1) with nonnegative last column; basis[i] names the column
    basic in row i; tableau rows are already reduced.  Mutates T and basis.
    Returns 'optimal' or 'unbounded'.
    """
    m, n1 = T.shape
    n = n1 - 1
    while True:
        red = cost - cost[basis] @ T[:, :n]
        red[basis] = 0.0  # kill accumulated round-off on basic columns
        enter = -1
        for j in range(n):
            if red[j] < -TOL:
                enter = j  # Bland: lowest eligible index
                break
        if enter < 0:
            return 'optimal'
        col = T[:, enter]
        leave = -1
        best = np.inf
        for i in range(m):
            if col[i] > TOL:
                ratio = T[i, n] / col[i]
                if leave < 0 or ratio < best - TOL:
                    best, leave = ratio, i
                elif ratio < best + TOL and basis[i] < basis[leave]:
                    leave = i  # Bland tie-break on departing index
        if leave < 0:
            return 'unbounded'
        T[leave] /= T[leave, enter]
        colv = T[:, enter].copy()
        colv[leave] = 0.0
        T -= np.outer(colv, T[leave])
        basis[leave] = enter


def linear_program(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None):
    """Minimize c@x subject to A_ub@x <= b_ub and A_eq@x = b_eq, x free.

    Solved with scipy's HiGHS backend when available (these LPs dominate the
    offline enumeration and set computations); the built-in two-phase simplex
    below is the fallback and the reference implementation.  An ambiguous
    HiGHS status (iteration limit, numerical trouble) also falls back.
    """
    c = np.asarray(c, dtype=float).ravel()
    rows_ub = 0 if A_ub is None else np.atleast_2d(np.asarray(A_ub)).shape[0]
    rows_eq = 0 if A_eq is None else np.atleast_2d(np.asarray(A_eq)).shape[0]
    if rows_ub == 0 and rows_eq == 0:
        if np.all(c == 0.0):
            return LpResult('optimal', np.zeros(c.size), 0.0)
        return LpResult('unbounded', None, -np.inf)
    try:
        from scipy.optimize import linprog
    except ImportError:
        return _simplex_lp(c, A_ub, b_ub, A_eq, b_eq)
    res = linprog(c, A_ub=A_ub if rows_ub else None, b_ub=b_ub if rows_ub else None,
                  A_eq=A_eq if rows_eq else None, b_eq=b_eq if rows_eq else None,
                  bounds=(None, None), method="highs")
    if res.status == 0:
        return LpResult('optimal', np.asarray(res.x, dtype=float), float(res.fun))
    if res.status == 2:
        return LpResult('infeasible', None, np.inf)
    if res.status == 3:
        return LpResult('unbounded', None, -np.inf)
    return _simplex_lp(c, A_ub, b_ub, A_eq, b_eq)


def _simplex_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None):
    """Two-phase dense simplex.  Free variables are split x = x+ - x-;
    inequality rows get slacks; all rows get phase-1 artificials.
    """
    c = np.asarray(c, dtype=float).ravel()
    n = c.size
    if A_ub is None:
        A_ub = np.zeros((0, n))
        b_ub = np.zeros(0)
    if A_eq is None:
        A_eq = np.zeros((0, n))
        b_eq = np.zeros(0)
    A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
    A_eq = np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_ub = np.asarray(b_ub, dtype=float).ravel()
    b_eq = np.asarray(b_eq, dtype=float).ravel()
    mu, me = A_ub.shape[0], A_eq.shape[0]
    m = mu + me

    A = np.zeros((m, 2 * n + mu))
    A[:mu, :n] = A_ub
    A[:mu, n:2 * n] = -A_ub
    A[:mu, 2 * n:] = np.eye(mu)
    A[mu:, :n] = A_eq
    A[mu:, n:2 * n] = -A_eq
    b = np.concatenate([b_ub, b_eq])

    # row equilibration keeps the tolerance meaningful across scales
    scale = np.maximum(1.0, np.abs(A).max(axis=1)) if m else np.ones(0)
    A /= scale[:, None]
    b = b / scale
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    n_real = 2 * n + mu
    T = np.hstack([A, np.eye(m), b[:, None]])
    basis = list(range(n_real, n_real + m))
    cost1 = np.concatenate([np.zeros(n_real), np.ones(m)])
    _run_simplex(T, basis, cost1)
    if T[:, -1] @ (np.array(basis) >= n_real) > 1e-8:
        return LpResult('infeasible')

    # drive leftover artificials out of the basis; drop redundant rows
    drop = []
    for i in range(len(basis)):
        if basis[i] >= n_real:
            piv = -1
            for j in range(n_real):
                if abs(T[i, j]) > 1e-7:
                    piv = j
                    break
            if piv < 0:
                drop.append(i)
                continue
            T[i] /= T[i, piv]
            colv = T[:, piv].copy()
            colv[i] = 0.0
            T -= np.outer(colv, T[i])
            basis[i] = piv
    if drop:
        T = np.delete(T, drop, axis=0)
        basis = [bi for i, bi in enumerate(basis) if i not in set(drop)]

    T2 = np.hstack([T[:, :n_real], T[:, -1:]])
    cost2 = np.concatenate([c, -c, np.zeros(mu)])
    status = _run_simplex(T2, basis, cost2)
    if status == 'unbounded':
        return LpResult('unbounded')
    xs = np.zeros(n_real)
    xs[basis] = T2[:, -1]
    x = xs[:n] - xs[n:2 * n]
    return LpResult('optimal', x, float(c @ x))


@dataclass
class Polyhedron:
    """{x : H x <= b, H_eq x = b_eq} with H of shape (m, d)."""

    H: np.ndarray
    b: np.ndarray
    H_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        assert self.H.shape[0] == self.b.size, \
            f"row mismatch: H {self.H.shape} vs b {self.b.shape}"
        if self.H_eq is not None:
            self.H_eq = np.atleast_2d(np.asarray(self.H_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            assert self.H_eq.shape[1] == self.H.shape[1]
            assert self.H_eq.shape[0] == self.b_eq.size

    @property
    def dim(self):
        return self.H.shape[1]

    @property
    def n_ineq(self):
        return self.H.shape[0]

    def eq_rows(self):
        if self.H_eq is None:
            return np.zeros((0, self.dim)), np.zeros(0)
        return self.H_eq, self.b_eq


def box(lo, hi):
    """Axis-aligned box {lo <= x <= hi} as a Polyhedron."""
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    d = lo.size
    eye = np.eye(d)
    return Polyhedron(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))


def contains(P, x, tol=TOL):
    """Membership test with per-row normalized violation."""
    x = np.asarray(x, dtype=float).ravel()
    if P.n_ineq:
        norms = np.maximum(np.linalg.norm(P.H, axis=1), 1e-12)
        if np.any((P.H @ x - P.b) / norms > tol):
            return False
    Heq, beq = P.eq_rows()
    if Heq.shape[0]:
        norms = np.maximum(np.linalg.norm(Heq, axis=1), 1e-12)
        if np.any(np.abs(Heq @ x - beq) / norms > tol):
            return False
    return True


def is_empty(P):
    Heq, beq = P.eq_rows()
    res = linear_program(np.zeros(P.dim), P.H, P.b, Heq, beq)
    return res.status == 'infeasible'


def chebyshev_center(P, cap=1e6):
    """Largest inscribed ball; radius is capped so unbounded sets stay LP-solvable.

    Returns (center, radius); (None, radius < 0 or -inf) when P is empty.
    """
    d = P.dim
    norms = np.linalg.norm(P.H, axis=1) if P.n_ineq else np.zeros(0)
    A = np.hstack([P.H, norms[:, None]]) if P.n_ineq else np.zeros((0, d + 1))
    A = np.vstack([A, np.concatenate([np.zeros(d), [1.0]])])
    rhs = np.concatenate([P.b, [cap]])
    Heq, beq = P.eq_rows()
    Aeq = np.hstack([Heq, np.zeros((Heq.shape[0], 1))]) if Heq.shape[0] else None
    c = np.zeros(d + 1)
    c[-1] = -1.0
    res = linear_program(c, A, rhs, Aeq, beq if Aeq is not None else None)
    if res.status != 'optimal':
        return None, -np.inf
    if res.x[d] < 0:
        return None, float(res.x[d])
    return res.x[:d], float(res.x[d])


def normalize_rows(H, b):
    """Scale each row of (H, b) to unit 2-norm; drop trivial all-zero rows."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    norms = np.linalg.norm(H, axis=1)
    keep = []
    for i, nm in enumerate(norms):
        if nm < 1e-12:
            if b[i] < -1e-12:
                keep.append(i)  # infeasible marker row, keep as evidence
        else:
            keep.append(i)
    H, b, norms = H[keep], b[keep], norms[keep]
    norms = np.maximum(norms, 1e-12)
    return H / norms[:, None], b / norms


def _dominance_filter(H, b):
    """Exact duplicates once; among parallel rows keep the tightest bound."""
    if not H.shape[0]:
        return H, b
    best = {}
    order = []
    for i in range(H.shape[0]):
        key = np.round(H[i], 10).tobytes()
        if key not in best:
            best[key] = i
            order.append(i)
        elif b[i] < b[best[key]]:
            b[best[key]] = b[i]
    return H[order], b[order]


def remove_redundant(P, tol=TOL):
    """Drop inequality rows implied by the others.

    Parallel rows are merged first.  Large systems go through an incremental
    filter (a row implied by the rows accepted so far is implied by the full
    set, so it can be dropped immediately); the survivors then get the exact
    one-LP-per-row sweep.
    """
    H, b = normalize_rows(P.H, P.b)
    H, b = _dominance_filter(H, np.array(b))
    Heq, beq = P.eq_rows()

    if Heq.shape[0] == 0 and H.shape[0] > 48:
        kept = []
        for i in range(H.shape[0]):
            if kept:
                res = linear_program(-H[i], H[kept], b[kept])
                if res.status == 'optimal' and -res.fun <= b[i] + tol:
                    continue
            kept.append(i)
        H, b = H[kept], b[kept]

    keep = list(range(H.shape[0]))
    i = 0
    while i < len(keep):
        ri = keep[i]
        others = [r for r in keep if r != ri]
        A = np.vstack([H[others], H[ri][None, :]]) if others else H[ri][None, :]
        rhs = np.concatenate([b[others], [b[ri] + 1.0]])
        res = linear_program(-H[ri], A, rhs, Heq if Heq.shape[0] else None,
                             beq if Heq.shape[0] else None)
        if res.status == 'optimal' and -res.fun <= b[ri] + tol:
            keep.pop(i)  # implied by the rest
        else:
            i += 1
    return Polyhedron(H[keep], b[keep],
                      Heq if Heq.shape[0] else None,
                      beq if Heq.shape[0] else None)


def intersect(P, Q):
    """Row-wise intersection of two polyhedra in the same space."""
    assert P.dim == Q.dim
    Hp, bp = P.eq_rows()
    Hq, bq = Q.eq_rows()
    Heq = np.vstack([Hp, Hq])
    return Polyhedron(np.vstack([P.H, Q.H]), np.concatenate([P.b, Q.b]),
                      Heq if Heq.shape[0] else None,
                      np.concatenate([bp, bq]) if Heq.shape[0] else None)


def is_subset(P, Q, tol=1e-7):
    """P subseteq Q by maximizing each row of Q over P (one LP per row)."""
    Heq, beq = P.eq_rows()
    for h, beta in zip(Q.H, Q.b):
        scale = max(1.0, float(np.linalg.norm(h)))
        res = linear_program(-h, P.H, P.b, Heq if Heq.shape[0] else None,
                             beq if Heq.shape[0] else None)
        if res.status == 'infeasible':
            return True  # empty set is a subset of everything
        if res.status != 'optimal' or -res.fun > beta + tol * scale:
            return False
    return True


def set_equal(P, Q, tol=1e-7):
    return is_subset(P, Q, tol) and is_subset(Q, P, tol)


def eliminate(P, cols, tol=TOL):
    """Fourier-Motzkin elimination of the given coordinates.

    Supports inequality rows only.  Each step pairs every lower bound on the
    eliminated coordinate with every upper bound, then removes redundant rows
    so intermediate systems stay small.  Columns are dropped from the output,
    so the result lives in the remaining coordinates (original order).
    """
    Heq, _ = P.eq_rows()
    assert Heq.shape[0] == 0, "eliminate expects a pure inequality description"
    H = np.array(P.H)
    b = np.array(P.b)
    for col in sorted(set(int(c) for c in cols), reverse=True):
        a = H[:, col]
        up = np.where(a > tol)[0]
        lo = np.where(a < -tol)[0]
        mid = np.where(np.abs(a) <= tol)[0]
        rows = [np.delete(H[mid], col, axis=1)]
        rhs = [b[mid]]
        for u in up:
            for l in lo:
                wu, wl = -a[l], a[u]  # both positive, cancel the column
                rows.append(np.delete(wu * H[u] + wl * H[l], col)[None, :])
                rhs.append([wu * b[u] + wl * b[l]])
        H = np.vstack(rows) if rows else np.zeros((0, H.shape[1] - 1))
        b = np.concatenate([np.asarray(r, dtype=float).ravel() for r in rhs])
        H, b = normalize_rows(H, b)
        if H.shape[0]:
            stacked = np.unique(np.round(np.hstack([H, b[:, None]]), 12), axis=0)
            H, b = stacked[:, :-1], stacked[:, -1]
        reduced = remove_redundant(Polyhedron(H, b))
        H, b = reduced.H, reduced.b
    return Polyhedron(H, b)


def project(P, keep, tol=TOL):
    """Orthogonal projection onto the listed coordinates (ascending order)."""
    keep = [int(k) for k in keep]
    assert keep == sorted(keep), "projection coordinates must be ascending"
    drop = [j for j in range(P.dim) if j not in set(keep)]
    return eliminate(P, drop, tol)


def vertices(P, tol=1e-7):
    """All vertices of a bounded low-dimensional polyhedron.

    Brute force over row combinations; intended for dim <= 6 after
    redundancy removal.  Output rows are sorted lexicographically.
    """
    d = P.dim
    Heq, beq = P.eq_rows()
    re = int(np.linalg.matrix_rank(Heq)) if Heq.shape[0] else 0
    need = d - re
    assert need >= 0, "over-determined equality system"
    cands = []
    for combo in combinations(range(P.n_ineq), need):
        M = np.vstack([Heq, P.H[list(combo)]]) if Heq.shape[0] else P.H[list(combo)]
        rhs = np.concatenate([beq, P.b[list(combo)]])
        if np.linalg.matrix_rank(M, tol=1e-9) < d:
            continue
        x, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        if np.max(np.abs(M @ x - rhs)) > 1e-8 * max(1.0, np.abs(rhs).max()):
            continue
        if contains(P, x, tol):
            cands.append(x)
    out = []
    for x in sorted(cands, key=lambda v: tuple(v)):
        if all(np.linalg.norm(x - y) > tol * (1.0 + np.linalg.norm(x)) for y in out):
            out.append(x)
    return np.array(out) if out else np.zeros((0, d))


def canonicalize(P):
    """Unit-norm rows, deduplicated, sorted lexicographically.

    Used to make serialized regions byte-stable across runs.  Equality rows
    get a sign convention (first nonzero coefficient positive).
    """
    H, b = normalize_rows(P.H, P.b)
    if H.shape[0]:
        stacked = np.unique(np.hstack([H, b[:, None]]), axis=0)
        H, b = stacked[:, :-1], stacked[:, -1]
    Heq, beq = P.eq_rows()
    if Heq.shape[0]:
        Heq, beq = normalize_rows(Heq, beq)
        Heq = Heq.copy()
        beq = beq.copy()
        for i in range(Heq.shape[0]):
            nz = np.nonzero(np.abs(Heq[i]) > 1e-12)[0]
            if nz.size and Heq[i, nz[0]] < 0:
                Heq[i] *= -1.0
                beq[i] *= -1.0
        stacked = np.unique(np.hstack([Heq, beq[:, None]]), axis=0)
        Heq, beq = stacked[:, :-1], stacked[:, -1]
        return Polyhedron(H, b, Heq, beq)
    return Polyhedron(H, b)
