"""Equality-constrained tracking QP over the coupling constraints.

Step 2b of the controller solves

    min_y  sum_k (y_k - r_k)' Sigma_k (y_k - r_k)
    s.t.   G_{k+1} y_{k+1} = H_k y_k + h_k(x0),    k = 0..N-1

Eliminating the primal blocks gives a dual system S d = A r - h with
S = A (2 Sigma)^{-1} A', which is block tridiagonal because coupling block k
shares primal variables only with blocks k-1 and k+1.  S is positive definite
(the stacked coupling matrix has full row rank even though individual H_k
blocks are tall), so its block Cholesky pivots exist and are factorized
offline; the online solve is two sweeps of back-substitutions plus one
matrix-vector pass per stage, so its cost grows linearly with the horizon.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class CoupledFactorization:
    """Immutable offline factorization; one instance serves every online solve."""

    N: int
    block_dims: tuple
    h0_map: np.ndarray
    H_blocks: list
    G_blocks: list
    Sig2: list
    Diag: list
    Off: list
    _sig_chol: list = None
    _diag_chol: list = None

    def __post_init__(self):
        if self._sig_chol is None:
            self._sig_chol = [cho_factor(M) for M in self.Sig2]
            self._diag_chol = [cho_factor(M) for M in self.Diag]


def factorize(sp) -> CoupledFactorization:
    """Block Cholesky of the dual Schur complement S = A (2 Sigma)^{-1} A'.

    S_kk = H_k V_k H_k' + G_{k+1} V_{k+1} G_{k+1}' and
    S_{k,k+1} = -G_{k+1} V_{k+1} H_{k+1}' with V_k = (2 Sigma_k)^{-1}; the
    pivots are D_0 = S_00, D_{k+1} = S_{k+1,k+1} - S_{k+1,k} D_k^{-1} S_{k,k+1}.
    """
    N = sp.N
    Sig2 = [2.0 * sp.sigma(k) for k in range(N + 1)]
    V = [np.linalg.inv(M) for M in Sig2]
    H_blocks = [np.array(sp.H0)] + [np.array(sp.Hk) for _ in range(N - 1)]
    G_blocks = [np.array(sp.Gk) for _ in range(N - 1)] + [np.array(sp.GN)]

    S_diag, S_off = [], []
    for k in range(N):
        Gk1 = G_blocks[k]
        Skk = H_blocks[k] @ V[k] @ H_blocks[k].T + Gk1 @ V[k + 1] @ Gk1.T
        S_diag.append(0.5 * (Skk + Skk.T))
        if k + 1 < N:
            S_off.append(-Gk1 @ V[k + 1] @ H_blocks[k + 1].T)

    Diag = [S_diag[0]]
    for k in range(1, N):
        piv = cho_factor(Diag[k - 1])
        upd = S_off[k - 1].T @ cho_solve(piv, S_off[k - 1])
        Dk = S_diag[k] - upd
        Diag.append(0.5 * (Dk + Dk.T))

    dims = tuple(Sig2[k].shape[0] for k in range(N + 1))
    h0_map = np.vstack([sp.problem.A, sp.problem.D])
    return CoupledFactorization(N=N, block_dims=dims, h0_map=h0_map,
                                H_blocks=H_blocks, G_blocks=G_blocks,
                                Sig2=Sig2, Diag=Diag, Off=S_off)


def solve_tracking(fact: CoupledFactorization, y_ref, x0):
    """Minimize the tracking objective subject to the coupling rows.

    Returns the primal blocks (stacked) and the coupling duals delta with the
    sign convention 2 Sigma_k (y_k - r_k) + (A' delta)_k = 0.
    """
    N = fact.N
    x0 = np.asarray(x0, dtype=float)
    refs = _split(fact, np.asarray(y_ref, dtype=float))

    # rhs_k = G_{k+1} r_{k+1} - H_k r_k - h_k
    rhs = []
    for k in range(N):
        r = fact.G_blocks[k] @ refs[k + 1] - fact.H_blocks[k] @ refs[k]
        if k == 0:
            r = r - fact.h0_map @ x0
        rhs.append(r)

    # forward sweep of the block LDL' solve
    v = [rhs[0]]
    for k in range(1, N):
        t = cho_solve(fact._diag_chol[k - 1], v[k - 1])
        v.append(rhs[k] - fact.Off[k - 1].T @ t)

    # back substitution
    delta = [None] * N
    delta[N - 1] = cho_solve(fact._diag_chol[N - 1], v[N - 1])
    for k in range(N - 2, -1, -1):
        delta[k] = cho_solve(fact._diag_chol[k], v[k] - fact.Off[k] @ delta[k + 1])

    # primal recovery: y_k = r_k - (2 Sigma_k)^{-1} (A' delta)_k
    y_blocks = []
    for k in range(N + 1):
        if k == 0:
            at = -fact.H_blocks[0].T @ delta[0]
        elif k < N:
            at = fact.G_blocks[k - 1].T @ delta[k - 1] - fact.H_blocks[k].T @ delta[k]
        else:
            at = fact.G_blocks[N - 1].T @ delta[N - 1]
        y_blocks.append(refs[k] - cho_solve(fact._sig_chol[k], at))
    return np.concatenate(y_blocks), np.concatenate(delta)


def _split(fact, y):
    out = []
    at = 0
    for d in fact.block_dims:
        out.append(y[at:at + d])
        at += d
    return out


def kkt_residual(sp, y, delta, y_ref, x0):
    """Max-norm stationarity and primal residual of the tracking KKT system."""
    stat = 2.0 * (sp.Q_matrix() @ (y - y_ref)) + sp.apply_AT(delta)
    prim = sp.coupling_residual(y, x0)
    return max(float(np.max(np.abs(stat))), float(np.max(np.abs(prim))))


def fact_to_json(fact):
    return {
        "N": fact.N,
        "block_dims": list(fact.block_dims),
        "h0_map": fact.h0_map.tolist(),
        "H_blocks": [M.tolist() for M in fact.H_blocks],
        "G_blocks": [M.tolist() for M in fact.G_blocks],
        "Sig2": [M.tolist() for M in fact.Sig2],
        "Diag": [M.tolist() for M in fact.Diag],
        "Off": [M.tolist() for M in fact.Off],
    }


def fact_from_json(d):
    return CoupledFactorization(
        N=d["N"], block_dims=tuple(d["block_dims"]),
        h0_map=np.array(d["h0_map"]),
        H_blocks=[np.array(M) for M in d["H_blocks"]],
        G_blocks=[np.array(M) for M in d["G_blocks"]],
        Sig2=[np.array(M) for M in d["Sig2"]],
        Diag=[np.array(M) for M in d["Diag"]],
        Off=[np.array(M) for M in d["Off"]],
    )
