"""Tracking QP factorization against a dense saddle-point oracle."""

import json

import numpy as np
import pytest

from pempc.coupled import (CoupledFactorization, fact_from_json, fact_to_json,
                           factorize, kkt_residual, solve_tracking)
from pempc.problem import (InterconnectedSpec, build_spring_damper_benchmark,
                           stack_problem)


def _benchmark(I_bar=1, N=5):
    p = build_spring_damper_benchmark(InterconnectedSpec(I_bar=I_bar), horizon=N)
    return stack_problem(p)


def _dense_oracle(sp, y_ref, x0):
    # saddle-point system [2Q  A'; A  0] [y; d] = [2Q r; h]
    Q2 = 2.0 * sp.Q_matrix()
    A = sp.A_matrix()
    n, m = sp.n_y, sp.n_dual
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = Q2
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([Q2 @ y_ref, sp.h_of(x0)])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n], sol[n:]


def test_zero_reference_zero_state():
    sp = _benchmark()
    fact = factorize(sp)
    y, d = solve_tracking(fact, np.zeros(sp.n_y), np.zeros(2))
    assert np.max(np.abs(y)) == 0.0
    assert np.max(np.abs(d)) == 0.0


def test_feasible_reference_is_fixed_point():
    sp = _benchmark()
    fact = factorize(sp)
    rng = np.random.default_rng(3)
    x0 = np.array([0.3, -0.1])
    # build a reference satisfying the coupling rows exactly
    u_seq = rng.uniform(-0.5, 0.2, size=sp.N)
    p = sp.problem
    elim = p.elimination_matrix()
    blocks = []
    x = x0.copy()
    for k in range(sp.N):
        u = np.array([u_seq[k]])
        z = elim @ x
        if k == 0:
            blocks.append(np.concatenate([u, z]))
        else:
            blocks.append(np.concatenate([x, u, z]))
        x = p.A @ x + p.B @ u + p.C @ z
    blocks.append(x)
    y_ref = np.concatenate(blocks)
    assert np.max(np.abs(sp.coupling_residual(y_ref, x0))) < 1e-12

    y, d = solve_tracking(fact, y_ref, x0)
    assert np.max(np.abs(y - y_ref)) < 1e-9
    assert np.max(np.abs(d)) < 1e-9


@pytest.mark.parametrize("I_bar,N", [(1, 1), (1, 3), (1, 5), (2, 1), (2, 4), (2, 7)])
def test_matches_dense_oracle(I_bar, N):
    sp = _benchmark(I_bar, N)
    fact = factorize(sp)
    rng = np.random.default_rng(100 * I_bar + N)
    for _ in range(5):
        y_ref = rng.normal(size=sp.n_y)
        x0 = rng.normal(size=sp.problem.n_x) * 0.3
        y, d = solve_tracking(fact, y_ref, x0)
        y_o, d_o = _dense_oracle(sp, y_ref, x0)
        scale = 1.0 + float(np.max(np.abs(d_o)))
        assert np.max(np.abs(y - y_o)) < 1e-9 * scale
        assert np.max(np.abs(d - d_o)) < 1e-9 * scale
        assert kkt_residual(sp, y, d, y_ref, x0) < 1e-8 * scale


def test_single_stage_dimensions():
    sp = _benchmark(I_bar=1, N=1)
    fact = factorize(sp)
    assert fact.block_dims == (3, 2)
    assert sp.n_y == 5
    assert sp.n_dual == 4
    y, d = solve_tracking(fact, np.ones(5), np.zeros(2))
    assert y.shape == (5,)
    assert d.shape == (4,)


def test_coupling_rows_satisfied():
    sp = _benchmark(2, 6)
    fact = factorize(sp)
    rng = np.random.default_rng(11)
    for _ in range(4):
        y_ref = rng.normal(size=sp.n_y)
        x0 = rng.normal(size=sp.problem.n_x) * 0.2
        y, _ = solve_tracking(fact, y_ref, x0)
        assert np.max(np.abs(sp.coupling_residual(y, x0))) < 1e-9


def test_factorization_deterministic_and_serializable():
    sp = _benchmark(1, 4)
    a = json.dumps(fact_to_json(factorize(sp)), sort_keys=True)
    b = json.dumps(fact_to_json(factorize(sp)), sort_keys=True)
    assert a == b
    fact = fact_from_json(json.loads(a))
    assert isinstance(fact, CoupledFactorization)
    rng = np.random.default_rng(5)
    y_ref = rng.normal(size=sp.n_y)
    x0 = np.array([0.1, 0.2])
    y1, d1 = solve_tracking(fact, y_ref, x0)
    y2, d2 = solve_tracking(factorize(sp), y_ref, x0)
    assert np.array_equal(y1, y2)
    assert np.array_equal(d1, d2)
