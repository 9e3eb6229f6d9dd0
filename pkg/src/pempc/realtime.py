"""Fixed-iteration controller built on the stage maps and the coupled solve.

Each call runs a fixed number of primal-dual cycles.  One cycle evaluates the
explicit stage maps at parameters formed from the current iterate (the
decoupled pass), then projects onto the coupling constraints through the
offline factorization and takes a dual step.  The input applied to the plant
is the first-stage input of the last decoupled pass, and the iterate is
shifted one stage to warm start the next call.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .coupled import solve_tracking
from .mpqp import ParameterOutsideMap


@dataclass
class ControllerConfig:
    m_bar: int = 5
    gamma: float = 2.0
    map_fallback: bool = False   # dense stage solve when a map lookup misses
    coupling_tol: float = 1e-9

    def __post_init__(self):
        assert self.m_bar >= 1, "need at least one cycle"
        assert self.gamma > 0.0


@dataclass
class IterateState:
    """Primal iterate, coupling dual, last decoupled pass, and cycle index."""

    y: np.ndarray
    lam: np.ndarray
    xi: np.ndarray = None
    m: int = 1


def cold_start(sp) -> IterateState:
    return IterateState(y=np.zeros(sp.n_y), lam=np.zeros(sp.n_dual), m=1)


def conjugate_value(sp, lam) -> float:
    """Convex conjugate of the separable objective at A' lam."""
    return sp.conjugate(lam)


def rescale_initialization(sp, state, x0, gamma):
    """Scale (y, lam) so the merit f = F(y) + F*(lam) sits below gamma^2 |x0|_Q^2.

    Both parts of f are homogeneous of degree two, so one multiplicative
    factor reaches the target exactly.  Returns (state, f_before, rescaled).
    """
    f1 = sp.quad_form(state.y) + sp.conjugate(state.lam)
    cap = gamma ** 2 * float(x0 @ sp.problem.Q @ x0)
    if f1 <= cap or f1 <= 0.0:
        return state, f1, False
    s = np.sqrt(cap / f1)
    return replace(state, y=s * state.y, lam=s * state.lam), f1, True


def compute_subproblem_parameters(sp, y, lam):
    """Linear terms theta_k of the decoupled stage problems at (y, lam)."""
    yb = sp.split(y)
    lb = sp.split_dual(lam)
    N = sp.N
    thetas = [-sp.H0.T @ lb[0] - 2.0 * (sp.sigma(0) @ yb[0])]
    for k in range(1, N):
        thetas.append(sp.Gk.T @ lb[k - 1] - sp.Hk.T @ lb[k]
                      - 2.0 * (sp.sigma(k) @ yb[k]))
    thetas.append(sp.GN.T @ lb[N - 1] - 2.0 * (sp.sigma(N) @ yb[N]))
    return thetas


def _stage_kind(k, N):
    if k == 0:
        return "stage0"
    return "terminal" if k == N else "interior"


def decoupled_pass(sp, store, thetas, x0, fallback=False):
    """Evaluate every stage map; returns the stacked minimizer and the
    active rows per stage.  With fallback enabled, a parameter that no
    stored region covers is answered by the map's dense active-set path."""
    blocks, actives = [], []
    for k in range(sp.N + 1):
        solver = store[_stage_kind(k, sp.N)]
        try:
            xi_k, act, _ = solver.evaluate(thetas[k], x0 if k == 0 else None)
        except ParameterOutsideMap as e:
            if not fallback:
                raise ParameterOutsideMap(f"stage {k}: {e}") from e
            xi_k, act, _ = solver.evaluate_dense(thetas[k], x0 if k == 0 else None)
        blocks.append(xi_k)
        actives.append(tuple(act))
    return np.concatenate(blocks), actives


def inner_iteration(sp, store, fact, state, x0, fallback=False):
    """One primal-dual cycle: decoupled stage solves, coupled projection,
    dual update.  Returns the advanced state and the stage active sets."""
    thetas = compute_subproblem_parameters(sp, state.y, state.lam)
    xi, actives = decoupled_pass(sp, store, thetas, x0, fallback)
    y_new, delta = solve_tracking(fact, 2.0 * xi - state.y, x0)
    new = IterateState(y=y_new, lam=state.lam + delta, xi=xi, m=state.m + 1)
    return new, actives


def first_stage_input(sp, xi):
    return np.array(xi[:sp.problem.n_u])


def shift_iterate(sp, state) -> IterateState:
    """Warm start for the next call: every block moves one stage earlier, the
    vacated tail is zero padded, and the cycle count restarts."""
    N = sp.N
    if N == 1:
        return IterateState(y=np.zeros(sp.n_y), lam=np.zeros(sp.n_dual), m=1)
    p = sp.problem
    yb = sp.split(state.y)
    lb = sp.split_dual(state.lam)
    new_blocks = [yb[1][p.n_x:]]
    for k in range(1, N - 1):
        new_blocks.append(yb[k + 1])
    new_blocks.append(np.concatenate([yb[N], np.zeros(p.n_u + p.n_z)]))
    new_blocks.append(np.zeros(p.n_x))
    new_lam = list(lb[1:]) + [np.zeros(sp.n_c)]
    return IterateState(y=sp.join(new_blocks), lam=np.concatenate(new_lam), m=1)


def control_step(sp, store, fact, config, state, x0):
    """Run the fixed cycle budget at the measured state and return the input.

    Returns (u0, shifted_state, diagnostics).  The diagnostics carry the
    initialization merit, the per-cycle active sets and dual step sizes, and
    the wall time of the iteration loop.
    """
    x0 = np.asarray(x0, dtype=float)
    state, f1, rescaled = rescale_initialization(sp, state, x0, config.gamma)
    diag = {"x0": x0.copy(), "f1": f1, "rescaled": rescaled,
            "active_sets": [], "dual_steps": [], "states": []}
    t0 = time.perf_counter()
    for _ in range(config.m_bar):
        lam_prev = state.lam
        state, actives = inner_iteration(sp, store, fact, state, x0,
                                         config.map_fallback)
        diag["active_sets"].append(actives)
        diag["dual_steps"].append(float(np.max(np.abs(state.lam - lam_prev))))
        diag["states"].append(state)
    diag["iter_seconds"] = time.perf_counter() - t0
    u0 = first_stage_input(sp, state.xi)
    diag["u0"] = u0.copy()
    assert np.max(np.abs(sp.coupling_residual(state.y, x0))) <= config.coupling_tol
    return u0, shift_iterate(sp, state), diag
