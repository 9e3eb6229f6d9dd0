"""Problem data: DAE-constrained linear-quadratic MPC instances, the
spring-vehicle-damper chain benchmark, assumption validation, and the stacked
(per-stage) reformulation used by the solver and the offline pipeline.

Model class:

    minimize  sum_k  x_k' Q x_k + u_k' R u_k + z_k' S z_k  +  x_N' P x_N
    over      x_{k+1} = A x_k + B u_k + C z_k,   0 = D x_k + E z_k,
              x_k in X, u_k in U, z_k in Z, x_N in XN.

The algebraic state z can always be eliminated via z = -E^{-1} D x, but the
solver keeps it explicit so stage subproblems stay small and decoupled.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .polytope import Polyhedron, box, contains


def _ro(a):
    """Read-only float array (problem objects are immutable by contract)."""
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class InterconnectedSpec:
    """Chain of mass-spring-damper "vehicles"; only the last one is actuated.

    Subsystem i has state (position, velocity).  Interior vehicles couple to
    both neighbours, so their diagonal block carries twice the spring and
    damping rates; the free end carries them once and receives the force
    input.  All subsystems are still modeled with one input channel each
    (zero effect for i < I_bar) so the input dimension is I_bar.
    """

    I_bar: int
    h: float = 0.1
    k_spring: float = 3.0
    m_mass: float = 1.0
    d_damp: float = 3.0

    def __post_init__(self):
        assert self.I_bar >= 1, "need at least one subsystem"
        assert self.h > 0 and self.m_mass > 0, "step size and mass must be positive"
        assert self.k_spring > 0 and self.d_damp >= 0

    def neighbors(self, i):
        return tuple(j for j in (i - 1, i + 1) if 0 <= j < self.I_bar)

    def diag_block(self, i):
        mult = 1.0 if i == self.I_bar - 1 else 2.0
        km = self.k_spring / self.m_mass
        dm = self.d_damp / self.m_mass
        return np.eye(2) + self.h * np.array([[0.0, 1.0],
                                              [-mult * km, -mult * dm]])

    def coupling_block(self, i, j):
        assert j in self.neighbors(i), f"subsystems {i},{j} are not neighbors"
        km = self.k_spring / self.m_mass
        dm = self.d_damp / self.m_mass
        return self.h * np.array([[0.0, 0.0], [km, dm]])

    def input_block(self, i):
        if i == self.I_bar - 1:
            return np.array([[0.0], [self.h / self.m_mass]])
        return np.zeros((2, 1))


@dataclass(frozen=True)
class MpcProblem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    P: np.ndarray
    N: int
    X: Polyhedron
    U: Polyhedron
    Z: Polyhedron
    XN: Polyhedron
    block_structure: tuple | None = None
    chain: InterconnectedSpec | None = None

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "E", "Q", "R", "S", "P"):
            object.__setattr__(self, name, _ro(getattr(self, name)))
        n_x, n_u, n_z = self.n_x, self.n_u, self.n_z
        assert self.A.shape == (n_x, n_x)
        assert self.C.shape == (n_x, n_z), f"C must be n_x x n_z, got {self.C.shape}"
        assert self.D.shape == (n_z, n_x)
        assert self.E.shape == (n_z, n_z)
        assert self.Q.shape == (n_x, n_x) and self.P.shape == (n_x, n_x)
        assert self.R.shape == (n_u, n_u) and self.S.shape == (n_z, n_z)
        assert self.N >= 1
        assert self.X.dim == n_x and self.XN.dim == n_x
        assert self.U.dim == n_u and self.Z.dim == n_z

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_z(self):
        return self.E.shape[0]

    def elimination_matrix(self):
        """-E^{-1} D, the map x -> z implied by the algebraic constraint."""
        return -np.linalg.solve(self.E, self.D)

    def eliminated_dynamics(self):
        """(A_tilde, Q_tilde): dynamics/state weight after removing z."""
        elim = self.elimination_matrix()
        return self.A + self.C @ elim, self.Q + elim.T @ self.S @ elim

    def stage_cost(self, x, u, z):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        z = np.asarray(z, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u + z @ self.S @ z)


_TERMINAL_CACHE = {}


def build_spring_damper_benchmark(spec, weights=None, horizon=10,
                                  terminal_set="lqr"):
    """Assemble the chain benchmark as an MpcProblem.

    The coupling terms of the physical dynamics are routed through the
    algebraic state: x+ = A x + B u + C z with A the block-diagonal part,
    C = I, and z = D x picking up the neighbor contributions (E = -I).

    terminal_set selects the terminal constraint: "lqr" (default) computes
    the largest sublevel region of the state box on which the Riccati
    feedback stays admissible forever, which makes the terminal set control
    invariant; "state-box" reuses the state box (not invariant, only useful
    for tests that exercise raw solver plumbing).  The "lqr" set depends on
    the chain spec and weights but not the horizon, so it is cached.
    """
    I_bar = spec.I_bar
    n_x = 2 * I_bar
    A = np.zeros((n_x, n_x))
    Bm = np.zeros((n_x, I_bar))
    D = np.zeros((n_x, n_x))
    blocks = []
    for i in range(I_bar):
        sl = slice(2 * i, 2 * i + 2)
        A[sl, sl] = spec.diag_block(i)
        Bm[sl, i:i + 1] = spec.input_block(i)
        for j in spec.neighbors(i):
            D[sl, 2 * j:2 * j + 2] = spec.coupling_block(i, j)
        blocks.append({"x": [2 * i, 2 * i + 1], "u": [i], "z": [2 * i, 2 * i + 1]})
    C = np.eye(n_x)
    E = -np.eye(n_x)

    weights = dict(weights or {})
    Q = _weight_matrix(weights.get("Q", 10.0), n_x)
    R = _weight_matrix(weights.get("R", 1.0), I_bar)
    S = _weight_matrix(weights.get("S", 1e-2), n_x)
    P = weights.get("P")
    if P is None:
        from .certification import dare  # deferred: certification imports us
        elim = -np.linalg.solve(E, D)
        A_t = A + C @ elim
        Q_t = Q + elim.T @ S @ elim
        P = dare(A_t, Bm, Q_t, R)
    P = np.asarray(P, dtype=float)

    X = box(np.tile([-0.5, -0.5], I_bar), np.tile([1.5, 1.0], I_bar))
    U = box(-2.0 * np.ones(I_bar), 0.5 * np.ones(I_bar))
    Z = Polyhedron(np.zeros((0, n_x)), np.zeros(0))  # unconstrained
    XN = box(np.tile([-0.5, -0.5], I_bar), np.tile([1.5, 1.0], I_bar))
    block_structure = tuple(
        tuple((k, tuple(v)) for k, v in blk.items()) for blk in blocks)
    p = MpcProblem(A, Bm, C, D, E, Q, R, S, P, int(horizon),
                   X, U, Z, XN, block_structure=block_structure, chain=spec)
    if terminal_set == "state-box":
        return p
    assert terminal_set == "lqr", terminal_set
    key = (spec.I_bar, spec.h, spec.k_spring, spec.m_mass, spec.d_damp,
           Q.tobytes(), R.tobytes(), S.tobytes(), P.tobytes())
    XN = _TERMINAL_CACHE.get(key)
    if XN is None:
        from .certification import lqr_invariant_set  # deferred, as above
        XN, _ = lqr_invariant_set(p)
        _TERMINAL_CACHE[key] = XN
    return dataclasses.replace(p, XN=XN)


def _weight_matrix(w, n):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(n)
    if w.ndim == 1:
        assert w.size == n
        return np.diag(w)
    assert w.shape == (n, n)
    return w


@dataclass
class ValidationReport:
    sets_contain_origin: bool      # assumption group (a)
    weights_positive_definite: bool  # (b)
    algebraic_matrix_invertible: bool  # (c)
    details: dict
    elimination_matrix: np.ndarray

    @property
    def all_passed(self):
        return (self.sets_contain_origin and self.weights_positive_definite
                and self.algebraic_matrix_invertible)


def _is_pd(M, name, details):
    sym = np.linalg.norm(M - M.T) <= 1e-9 * max(1.0, np.linalg.norm(M))
    eigs = np.linalg.eigvalsh(0.5 * (M + M.T))
    ok = bool(sym and eigs[0] > 1e-10 * max(eigs[-1], 1e-30))
    details[name] = {"symmetric": bool(sym), "min_eig": float(eigs[0]),
                     "max_eig": float(eigs[-1]), "positive_definite": ok}
    return ok


def validate_assumptions(p):
    """Check the standing assumptions; always returns a report, never raises."""
    details = {}
    zero_x = np.zeros(p.n_x)
    a_ok = (contains(p.X, zero_x) and contains(p.U, np.zeros(p.n_u))
            and contains(p.Z, np.zeros(p.n_z)) and contains(p.XN, zero_x))
    details["origin_in_sets"] = {
        "X": contains(p.X, zero_x), "U": contains(p.U, np.zeros(p.n_u)),
        "Z": contains(p.Z, np.zeros(p.n_z)), "XN": contains(p.XN, zero_x)}

    b_ok = True
    for name in ("Q", "R", "S", "P"):
        b_ok &= _is_pd(getattr(p, name), name, details)

    sv = np.linalg.svd(p.E, compute_uv=False)
    c_ok = bool(sv[-1] > 1e-10 * max(sv[0], 1e-30))
    details["E"] = {"smallest_singular_value": float(sv[-1]),
                    "condition": float(sv[0] / max(sv[-1], 1e-300))}
    elim = -np.linalg.solve(p.E, p.D) if c_ok else np.full((p.n_z, p.n_x), np.nan)
    return ValidationReport(bool(a_ok), bool(b_ok), c_ok, details, elim)


# ---------------------------------------------------------------------------
# stacked reformulation
# ---------------------------------------------------------------------------

class StackedProblem:
    """Per-stage view of the horizon problem.

    Stacked primal y = (y_0, ..., y_N) with y_0 = (u_0, z_0),
    y_k = (x_k, u_k, z_k) for 0 < k < N, y_N = x_N.  Dynamics and algebraic
    rows both live in the coupling: N equality blocks of n_x + n_z rows,

        G_{k+1} y_{k+1} - H_k y_k = h_k,   k = 0..N-1,

    with H_0 = [[B C],[0 E]], H_k = [[A B C],[D 0 E]], G_k = [[I 0 0],[0 0 0]]
    (interior), G_N = [[I],[0]], h_0 = [A x0; D x0] and h_k = 0.  The second
    row block of coupling block k reads 0 = D x_k + E z_k, so each algebraic
    constraint appears exactly once and the coupling duals are unique.  Stage
    sets carry only inequality rows (z is a free decision in every stage
    subproblem; the coupling step is what ties it to the states).

    F(y) = y' QQ y with QQ = blkdiag(Sigma_0..Sigma_N) is the pure-quadratic
    stacked cost; the optimal value of the horizon problem is
    J(x_0) = F(y*) + x_0' Q x_0.
    """

    def __init__(self, p: MpcProblem):
        self.problem = p
        n_x, n_u, n_z, N = p.n_x, p.n_u, p.n_z, p.N
        self.n_x, self.n_u, self.n_z, self.N = n_x, n_u, n_z, N
        self.dims = (n_u + n_z,) + (n_x + n_u + n_z,) * (N - 1) + (n_x,)
        self.offsets = tuple(np.concatenate([[0], np.cumsum(self.dims)]).astype(int))
        self.n_y = int(self.offsets[-1])
        self.n_c = n_x + n_z
        self.n_dual = N * self.n_c

        self.Sigma0 = _block_diag(p.R, p.S)
        self.Sigmak = _block_diag(p.Q, p.R, p.S)
        self.SigmaN = np.array(p.P)
        self.Sigma0_inv = np.linalg.inv(self.Sigma0)
        self.Sigmak_inv = np.linalg.inv(self.Sigmak)
        self.SigmaN_inv = np.linalg.inv(self.SigmaN)

        self.H0 = np.block([[p.B, p.C],
                            [np.zeros((n_z, n_u)), p.E]])
        self.Hk = np.block([[p.A, p.B, p.C],
                            [p.D, np.zeros((n_z, n_u)), p.E]])
        self.Gk = np.zeros((self.n_c, n_x + n_u + n_z))
        self.Gk[:n_x, :n_x] = np.eye(n_x)
        self.GN = np.zeros((self.n_c, n_x))
        self.GN[:n_x, :n_x] = np.eye(n_x)

        self._stage0 = self._build_stage0_rows()
        self._interior = self._build_interior_rows()
        self._terminal = self._build_terminal_rows()

    # -- block bookkeeping --------------------------------------------------

    def sigma(self, k):
        if k == 0:
            return self.Sigma0
        if k == self.N:
            return self.SigmaN
        return self.Sigmak

    def sigma_inv(self, k):
        if k == 0:
            return self.Sigma0_inv
        if k == self.N:
            return self.SigmaN_inv
        return self.Sigmak_inv

    def split(self, y):
        y = np.asarray(y, dtype=float)
        return [y[self.offsets[k]:self.offsets[k + 1]] for k in range(self.N + 1)]

    def join(self, blocks):
        return np.concatenate([np.asarray(b, dtype=float).ravel() for b in blocks])

    def split_dual(self, lam):
        lam = np.asarray(lam, dtype=float)
        n_c = self.n_c
        return [lam[k * n_c:(k + 1) * n_c] for k in range(self.N)]

    # -- stacked operators ----------------------------------------------------

    def quad_form(self, y):
        """F(y) = y' QQ y (pure quadratic, no state constant)."""
        blocks = self.split(y)
        total = blocks[0] @ self.Sigma0 @ blocks[0]
        for k in range(1, self.N):
            total += blocks[k] @ self.Sigmak @ blocks[k]
        total += blocks[self.N] @ self.SigmaN @ blocks[self.N]
        return float(total)

    def apply_A(self, y):
        """Coupling matrix action: block k is G_{k+1} y_{k+1} - H_k y_k."""
        blocks = self.split(y)
        out = np.zeros(self.n_dual)
        n_x, n_c, N = self.n_x, self.n_c, self.N
        for k in range(N):
            nxt = blocks[k + 1][:n_x] if k + 1 < N else blocks[N]
            prev = self.H0 @ blocks[0] if k == 0 else self.Hk @ blocks[k]
            out[k * n_c:k * n_c + n_x] = nxt
            out[k * n_c:(k + 1) * n_c] -= prev
        return out

    def apply_AT(self, lam):
        """Adjoint of apply_A under the pairing <lam, A y>."""
        lams = self.split_dual(lam)
        n_x, N = self.n_x, self.N
        parts = [-self.H0.T @ lams[0]]
        for k in range(1, N):
            c = -self.Hk.T @ lams[k]
            c[:n_x] += lams[k - 1][:n_x]
            parts.append(c)
        parts.append(lams[N - 1][:n_x].copy())
        return np.concatenate(parts)

    def h_of(self, x0):
        x0 = np.asarray(x0, dtype=float)
        out = np.zeros(self.n_dual)
        out[:self.n_x] = self.problem.A @ x0
        out[self.n_x:self.n_c] = self.problem.D @ x0
        return out

    def coupling_residual(self, y, x0):
        return self.apply_A(y) - self.h_of(x0)

    def conjugate(self, lam):
        """F*(lam) = (1/4) (A' lam)' QQ^{-1} (A' lam); F*(0) = 0."""
        c = self.split(self.apply_AT(lam))
        val = 0.25 * (c[0] @ self.Sigma0_inv @ c[0])
        for k in range(1, self.N):
            val += 0.25 * (c[k] @ self.Sigmak_inv @ c[k])
        val += 0.25 * (c[self.N] @ self.SigmaN_inv @ c[self.N])
        return float(val)

    def solve_Q(self, v):
        """QQ^{-1} v, stage by stage."""
        blocks = self.split(v)
        out = [self.Sigma0_inv @ blocks[0]]
        for k in range(1, self.N):
            out.append(self.Sigmak_inv @ blocks[k])
        out.append(self.SigmaN_inv @ blocks[self.N])
        return self.join(out)

    # dense assemblies for oracles/tests (small instances only)

    def A_matrix(self):
        M = np.zeros((self.n_dual, self.n_y))
        n_x, n_c, N = self.n_x, self.n_c, self.N
        for k in range(N):
            rows = slice(k * n_c, (k + 1) * n_c)
            if k == 0:
                M[rows, self.offsets[0]:self.offsets[1]] = -self.H0
            else:
                M[rows, self.offsets[k]:self.offsets[k + 1]] = -self.Hk
            cols = slice(self.offsets[k + 1], self.offsets[k + 1] + n_x)
            M[k * n_c:k * n_c + n_x, cols] += np.eye(n_x)
        return M

    def Q_matrix(self):
        M = np.zeros((self.n_y, self.n_y))
        for k in range(self.N + 1):
            sl = slice(self.offsets[k], self.offsets[k + 1])
            M[sl, sl] = self.sigma(k)
        return M

    # -- stage constraint rows -------------------------------------------------
    # Fixed row order (active sets index into it):
    #   stage 0:   successor-in-X | input | algebraic-ineq
    #   interior:  successor-in-X | state | input | algebraic-ineq
    #   terminal:  terminal-set rows
    # All rows are inequalities; z is unconstrained inside a stage unless the
    # algebraic variable carries its own bounds.

    def _build_stage0_rows(self):
        p = self.problem
        mX = p.X.n_ineq
        succ = np.hstack([p.B, p.C])
        A_in = np.vstack([
            p.X.H @ succ,
            np.hstack([p.U.H, np.zeros((p.U.n_ineq, self.n_z))]),
            np.hstack([np.zeros((p.Z.n_ineq, self.n_u)), p.Z.H]),
        ])
        b_in = np.concatenate([p.X.b, p.U.b, p.Z.b])
        B_x0 = np.vstack([
            -p.X.H @ p.A,
            np.zeros((p.U.n_ineq + p.Z.n_ineq, self.n_x)),
        ])
        return {"A_in": A_in, "b_in": b_in, "B_x0": B_x0, "n_successor": mX}

    def _build_interior_rows(self):
        p = self.problem
        nx, nu, nz = self.n_x, self.n_u, self.n_z
        succ = np.hstack([p.A, p.B, p.C])
        A_in = np.vstack([
            p.X.H @ succ,
            np.hstack([p.X.H, np.zeros((p.X.n_ineq, nu + nz))]),
            np.hstack([np.zeros((p.U.n_ineq, nx)), p.U.H, np.zeros((p.U.n_ineq, nz))]),
            np.hstack([np.zeros((p.Z.n_ineq, nx + nu)), p.Z.H]),
        ])
        b_in = np.concatenate([p.X.b, p.X.b, p.U.b, p.Z.b])
        return {"A_in": A_in, "b_in": b_in, "n_successor": p.X.n_ineq}

    def _build_terminal_rows(self):
        p = self.problem
        return {"A_in": np.array(p.XN.H), "b_in": np.array(p.XN.b)}

    def stage0_rows(self):
        return self._stage0

    def interior_rows(self):
        return self._interior

    def terminal_rows(self):
        return self._terminal

    def stage0_set(self, x0):
        """Y_0(x0) over (u, z) as a concrete Polyhedron."""
        s = self._stage0
        x0 = np.asarray(x0, dtype=float)
        return Polyhedron(s["A_in"], s["b_in"] + s["B_x0"] @ x0)

    def interior_set(self):
        s = self._interior
        return Polyhedron(s["A_in"], s["b_in"])

    def terminal_set(self):
        s = self._terminal
        return Polyhedron(s["A_in"], s["b_in"])

    def stage_set(self, k, x0=None):
        if k == 0:
            assert x0 is not None, "stage 0 set needs the measured state"
            return self.stage0_set(x0)
        if k == self.N:
            return self.terminal_set()
        return self.interior_set()

    def stage_cost_of_block(self, k, yk, x0=None):
        """Stage cost including the x0'Qx0 constant at stage 0."""
        yk = np.asarray(yk, dtype=float)
        val = float(yk @ self.sigma(k) @ yk)
        if k == 0:
            assert x0 is not None
            x0 = np.asarray(x0, dtype=float)
            val += float(x0 @ self.problem.Q @ x0)
        return val


def _block_diag(*mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    at = 0
    for m in mats:
        out[at:at + m.shape[0], at:at + m.shape[0]] = m
        at += m.shape[0]
    return out


def stack_problem(p: MpcProblem) -> StackedProblem:
    return StackedProblem(p)


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def _poly_to_json(P):
    out = {"H": P.H.tolist(), "b": P.b.tolist()}
    if P.H_eq is not None:
        out["H_eq"] = P.H_eq.tolist()
        out["b_eq"] = P.b_eq.tolist()
    return out


def _poly_from_json(d):
    return Polyhedron(np.array(d["H"], dtype=float).reshape(len(d["b"]), -1)
                      if d["b"] else np.zeros((0, d.get("dim", 0))),
                      d["b"],
                      d.get("H_eq"), d.get("b_eq"))


def problem_to_json(p: MpcProblem) -> dict:
    out = {
        "dynamics": {k: getattr(p, k).tolist() for k in ("A", "B", "C", "D", "E")},
        "weights": {k: getattr(p, k).tolist() for k in ("Q", "R", "S", "P")},
        "horizon": int(p.N),
        "sets": {"X": _poly_to_json(p.X), "U": _poly_to_json(p.U),
                 "Z": _set_with_dim(p.Z), "XN": _poly_to_json(p.XN)},
        "blocks": [list(map(list, blk)) for blk in p.block_structure]
        if p.block_structure else None,
    }
    if p.chain is not None:
        c = p.chain
        out["chain"] = {"I": c.I_bar, "h": c.h, "k": c.k_spring,
                        "m": c.m_mass, "d": c.d_damp}
    return out


def _set_with_dim(P):
    out = _poly_to_json(P)
    out["dim"] = P.dim
    return out


def problem_from_json(data) -> MpcProblem:
    """Accepts the explicit schema or the benchmark shorthand."""
    if "benchmark" in data:
        name = data["benchmark"].replace("-", "_")
        assert name == "spring_damper", f"unknown benchmark {data['benchmark']!r}"
        spec = InterconnectedSpec(
            I_bar=int(data.get("I", 1)), h=float(data.get("h", 0.1)),
            k_spring=float(data.get("k", 3.0)), m_mass=float(data.get("m", 1.0)),
            d_damp=float(data.get("d", 3.0)))
        return build_spring_damper_benchmark(spec, data.get("weights"),
                                             int(data.get("N", 10)))
    dyn, wts = data["dynamics"], data["weights"]
    sets = data["sets"]
    blocks = data.get("blocks")
    chain = data.get("chain")
    return MpcProblem(
        dyn["A"], dyn["B"], dyn["C"], dyn["D"], dyn["E"],
        wts["Q"], wts["R"], wts["S"], wts["P"], int(data["horizon"]),
        _poly_from_json(sets["X"]), _poly_from_json(sets["U"]),
        _poly_from_json(sets["Z"]), _poly_from_json(sets["XN"]),
        block_structure=tuple(tuple((k, tuple(v)) for k, v in blk) for blk in blocks)
        if blocks else None,
        chain=InterconnectedSpec(I_bar=int(chain["I"]), h=float(chain["h"]),
                                 k_spring=float(chain["k"]), m_mass=float(chain["m"]),
                                 d_damp=float(chain["d"])) if chain else None)


def save_problem(p: MpcProblem, path):
    with open(path, "w") as fh:
        json.dump(problem_to_json(p), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_problem(path) -> MpcProblem:
    with open(path) as fh:
        return problem_from_json(json.load(fh))


def problem_hash(p: MpcProblem) -> str:
    payload = json.dumps(problem_to_json(p), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
