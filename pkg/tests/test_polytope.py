import numpy as np
import pytest
from scipy.optimize import linprog as scipy_linprog

from pempc.polytope import (
    Polyhedron, box, canonicalize, chebyshev_center, contains, is_empty,
    linear_program, remove_redundant, vertices,
)


def scipy_oracle(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None):
    return scipy_linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                         bounds=(None, None), method="highs")


class TestLinearProgram:
    def test_simple_bounded(self):
        # min x + y on the unit box
        res = linear_program([1.0, 1.0], np.vstack([np.eye(2), -np.eye(2)]),
                             [1, 1, 1, 1])
        assert res.status == 'optimal'
        assert res.fun == pytest.approx(-2.0, abs=1e-9)

    def test_equality_rows(self):
        # min x s.t. x + y = 1, 0 <= x,y <= 1
        res = linear_program([1.0, 0.0], np.vstack([np.eye(2), -np.eye(2)]),
                             [1, 1, 0, 0], [[1.0, 1.0]], [1.0])
        assert res.status == 'optimal'
        assert res.fun == pytest.approx(0.0, abs=1e-9)
        assert res.x[1] == pytest.approx(1.0, abs=1e-9)

    def test_infeasible(self):
        res = linear_program([1.0], [[1.0], [-1.0]], [0.0, -1.0])
        assert res.status == 'infeasible'

    def test_unbounded(self):
        res = linear_program([-1.0], [[-1.0]], [0.0])
        assert res.status == 'unbounded'

    def test_beale_cycling_example(self):
        # classic tableau that cycles without an anti-cycling rule
        A = np.array([
            [0.25, -60.0, -1.0 / 25.0, 9.0, 1, 0, 0],
            [0.5, -90.0, -1.0 / 50.0, 3.0, 0, 1, 0],
            [0.0, 0.0, 1.0, 0.0, 0, 0, 1],
        ])
        b = np.array([0.0, 0.0, 1.0])
        c = np.array([-0.75, 150.0, -0.02, 6.0, 0, 0, 0])
        lo = np.zeros(7)
        A_ub = np.vstack([-np.eye(7)])
        res = linear_program(c, A_ub, -lo, A, b)
        assert res.status == 'optimal'
        assert res.fun == pytest.approx(-0.05, abs=1e-8)

    def test_random_against_scipy(self):
        rng = np.random.default_rng(0)
        agree = 0
        for _ in range(60):
            n = rng.integers(2, 6)
            mu = rng.integers(1, 8)
            me = rng.integers(0, min(n, 3))
            c = rng.normal(size=n)
            A_ub = rng.normal(size=(mu, n))
            x_feas = rng.normal(size=n)
            b_ub = A_ub @ x_feas + rng.uniform(0.1, 2.0, size=mu)
            A_eq = rng.normal(size=(me, n)) if me else None
            b_eq = A_eq @ x_feas if me else None
            ours = linear_program(c, A_ub, b_ub, A_eq, b_eq)
            ref = scipy_oracle(c, A_ub, b_ub, A_eq, b_eq)
            if ref.status == 2:
                assert ours.status == 'infeasible'
            elif ref.status == 3:
                assert ours.status == 'unbounded'
            else:
                assert ours.status == 'optimal'
                assert ours.fun == pytest.approx(ref.fun, abs=1e-7, rel=1e-7)
                agree += 1
        assert agree > 10  # sanity: the sweep actually exercised bounded LPs


class TestPolyhedron:
    def test_contains_box(self):
        P = box([-1, -1], [1, 1])
        assert contains(P, [0.0, 0.0])
        assert contains(P, [1.0, 1.0])
        assert not contains(P, [1.1, 0.0])

    def test_contains_equality(self):
        P = Polyhedron(np.eye(2), [1, 1], [[1.0, -1.0]], [0.0])
        assert contains(P, [0.5, 0.5])
        assert not contains(P, [0.5, 0.2])

    def test_is_empty(self):
        P = Polyhedron([[1.0], [-1.0]], [0.0, -1.0])
        assert is_empty(P)
        assert not is_empty(box([0], [1]))

    def test_chebyshev_center_of_box(self):
        # center is unique only along the short axis of a non-square box
        c, r = chebyshev_center(box([-1, -3], [1, 3]))
        assert r == pytest.approx(1.0, abs=1e-8)
        assert c[0] == pytest.approx(0.0, abs=1e-8)
        assert -2.0 - 1e-8 <= c[1] <= 2.0 + 1e-8

    def test_chebyshev_empty(self):
        c, r = chebyshev_center(Polyhedron([[1.0], [-1.0]], [0.0, -1.0]))
        assert c is None and r < 0

    def test_chebyshev_unbounded_capped(self):
        c, r = chebyshev_center(Polyhedron([[-1.0, 0.0]], [0.0]), cap=1e6)
        assert r == pytest.approx(1e6)

    def test_remove_redundant_drops_implied_row(self):
        # unit box plus x <= 2, which the box already implies
        H = np.vstack([np.eye(2), -np.eye(2), [[1.0, 0.0]]])
        b = np.array([1, 1, 1, 1, 2.0])
        P2 = remove_redundant(Polyhedron(H, b))
        assert P2.n_ineq == 4
        for x in ([0, 0], [1, 1], [-1, -1]):
            assert contains(P2, x)

    def test_remove_redundant_keeps_equivalence(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            H = rng.normal(size=(10, 3))
            b = H @ rng.normal(size=3) + rng.uniform(0.2, 1.5, size=10)
            P = Polyhedron(np.vstack([H, 2.0 * H]), np.concatenate([b, 2.0 * b + 0.5]))
            P2 = remove_redundant(P)
            assert P2.n_ineq <= P.n_ineq
            for _ in range(200):
                x = rng.normal(scale=2.0, size=3)
                assert contains(P, x, 1e-7) == contains(P2, x, 1e-7)

    def test_vertices_box(self):
        V = vertices(box([-1, -2], [1, 2]))
        expect = np.array([[-1, -2], [-1, 2], [1, -2], [1, 2]], dtype=float)
        assert V.shape == (4, 2)
        assert np.allclose(V, expect)

    def test_vertices_contain_chebyshev_center(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            H = rng.normal(size=(8, 3))
            b = H @ rng.normal(size=3) + rng.uniform(0.5, 1.5, size=8)
            P = Polyhedron(np.vstack([H, np.eye(3), -np.eye(3)]),
                           np.concatenate([b, 5 * np.ones(6)]))
            V = vertices(P)
            assert V.shape[0] >= 4
            for v in V:
                assert contains(P, v, 1e-6)
            c, r = chebyshev_center(P)
            assert r > 1e-6
            assert contains(P, c, 1e-6)
            # center lies in the hull of the vertices: solve a small LP
            nv = V.shape[0]
            res = linear_program(np.zeros(nv), -np.eye(nv), np.zeros(nv),
                                 np.vstack([V.T, np.ones(nv)]),
                                 np.concatenate([c, [1.0]]))
            assert res.status == 'optimal'

    def test_vertices_with_equality(self):
        # segment: unit square cut by x = y
        P = Polyhedron(np.vstack([np.eye(2), -np.eye(2)]), [1, 1, 0, 0],
                       [[1.0, -1.0]], [0.0])
        V = vertices(P)
        assert V.shape == (2, 2)
        assert np.allclose(V, [[0, 0], [1, 1]])

    def test_canonicalize_sorts_and_dedupes(self):
        H = np.array([[2.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
        b = np.array([2.0, 4.0, 1.0])
        P = canonicalize(Polyhedron(H, b))
        assert P.n_ineq == 2
        # rows are unit-norm and lexicographically sorted
        assert np.allclose(np.linalg.norm(P.H, axis=1), 1.0)
        assert tuple(P.H[0]) <= tuple(P.H[1])

    def test_canonicalize_equality_sign(self):
        P = canonicalize(Polyhedron(np.eye(2), [1, 1], [[-2.0, 0.0]], [-4.0]))
        assert np.allclose(P.H_eq, [[1.0, 0.0]])
        assert np.allclose(P.b_eq, [2.0])
