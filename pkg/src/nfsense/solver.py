"""Sparse SPD solver shared by the map-smoothing steps.

Builds finite-difference operators on the voxel grid, assembles the normal
equations of stacked weighted least-squares systems, and solves them with
preconditioned conjugate gradients (identity / Jacobi / zero-fill incomplete
Cholesky).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .core import Grid


class SolverError(Exception):
    pass


def difference_operator(grid: Grid, axis: int, order: int, support: np.ndarray | None = None) -> sp.csr_matrix:
    """Finite-difference operator along one grid axis as a sparse L x L matrix.

    order 1: forward difference [-1, +1] / pitch at each voxel.
    order 2: centered [+1, -2, +1] / pitch^2.
    Rows whose stencil touches the grid boundary or a voxel outside
    `support` are zeroed (replicate / zero-derivative convention).
    """
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0..2, got {axis}")
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    nvox = grid.nvox
    n_axis = grid.dims[axis]
    pitch = grid.pitch_m[axis]
    if support is None:
        support = np.ones(nvox, dtype=bool)
    support = np.asarray(support, dtype=bool).reshape(-1)

    ix, iy, iz = grid.multi_index(np.arange(nvox))
    idx = [ix, iy, iz]
    pos = idx[axis]

    step = np.zeros(3, dtype=int)
    step[axis] = 1

    def shifted(delta):
        return grid.linear_index(ix + step[0] * delta, iy + step[1] * delta, iz + step[2] * delta)

    rows, cols, vals = [], [], []
    if order == 1:
        ok = (pos + 1 < n_axis) & support
        nb = shifted(1)
        ok &= support[np.clip(nb, 0, nvox - 1)]
        r = np.where(ok)[0]
        rows.extend([r, r])
        cols.extend([r, nb[r]])
        vals.extend([np.full(r.size, -1.0 / pitch), np.full(r.size, 1.0 / pitch)])
    else:
        ok = (pos >= 1) & (pos + 1 < n_axis) & support
        lo, hi = shifted(-1), shifted(1)
        ok &= support[np.clip(lo, 0, nvox - 1)] & support[np.clip(hi, 0, nvox - 1)]
        r = np.where(ok)[0]
        c = 1.0 / pitch**2
        rows.extend([r, r, r])
        cols.extend([lo[r], r, hi[r]])
        vals.extend([np.full(r.size, c), np.full(r.size, -2.0 * c), np.full(r.size, c)])

    rows = np.concatenate(rows) if rows else np.array([], dtype=int)
    cols = np.concatenate(cols) if cols else np.array([], dtype=int)
    vals = np.concatenate(vals) if vals else np.array([], dtype=float)
    op = sp.coo_matrix((vals, (rows, cols)), shape=(nvox, nvox)).tocsr()
    op.sum_duplicates()
    return op


class NormalEquations:
    """Normal equations A = sum_b Op_b^T diag(w_b)^2 Op_b of a stacked system.

    Each block is a (weights, operator) pair representing diag(w) @ Op rows of
    the rectangular least-squares system.  `rhs(block, y)` maps an observation
    vector for one block into the normal-equations right-hand side.
    """

    def __init__(self, blocks):
        if not blocks:
            raise SolverError("no blocks given")
        ncols = blocks[0][1].shape[1]
        self.blocks = []
        mat = None
        for w, op in blocks:
            if op.shape[1] != ncols:
                raise SolverError("block column dimensions differ")
            w = np.asarray(w, dtype=float).reshape(-1)
            if w.size != op.shape[0]:
                raise SolverError("weight length does not match operator rows")
            wop = sp.diags(w) @ op
            term = (wop.T @ wop).tocsr()
            mat = term if mat is None else mat + term
            self.blocks.append((w, op.tocsr()))
        # symmetrize exactly: accumulate the average with the transpose
        self.matrix = ((mat + mat.T) * 0.5).tocsr()

    def rhs(self, block: int, y: np.ndarray) -> np.ndarray:
        w, op = self.blocks[block]
        y = np.asarray(y).reshape(-1)
        return op.T @ (w**2 * y)


# --------------------------------------------------------------------------
# preconditioners
# --------------------------------------------------------------------------

def identity_preconditioner(a: sp.spmatrix):
    return lambda r: r


def jacobi_preconditioner(a: sp.spmatrix):
    d = a.diagonal().copy()
    d[d <= 0] = 1.0
    inv = 1.0 / d
    return lambda r: inv * r


def ic0_factor(a: sp.csc_matrix, shift: float = 0.0) -> sp.csc_matrix:
    """Zero-fill incomplete Cholesky factor L of a (+ shift on the diagonal).

    Raises SolverError on breakdown (non-positive pivot).
    """
    a = sp.csc_matrix(a, copy=True)
    n = a.shape[0]
    if shift:
        a = a + shift * sp.eye(n, format="csc")
    a = sp.tril(a, format="csc")
    indptr, indices, data = a.indptr, a.indices, a.data
    for k in range(n):
        start, end = indptr[k], indptr[k + 1]
        if end == start or indices[start] != k:
            raise SolverError(f"missing diagonal entry at row {k}")
        piv = data[start]
        if piv <= 0:
            raise SolverError(f"non-positive pivot at row {k}")
        piv = np.sqrt(piv)
        data[start] = piv
        data[start + 1:end] /= piv
        # update remaining columns j > k restricted to existing sparsity
        col_rows = indices[start + 1:end]
        col_vals = data[start + 1:end]
        lookup = dict(zip(col_rows.tolist(), col_vals.tolist()))
        for t in range(start + 1, end):
            j = indices[t]
            ljk = data[t]
            js, je = indptr[j], indptr[j + 1]
            for u in range(js, je):
                i = indices[u]
                lik = lookup.get(i)
                if lik is not None:
                    data[u] -= lik * ljk
    return sp.csc_matrix((data, indices, indptr), shape=a.shape)


def ic0_preconditioner(a: sp.spmatrix):
    """IC(0) with diagonal-shift fallback (doubling from 1e-3 * max diag)."""
    a = sp.csc_matrix(a)
    maxd = float(np.max(np.abs(a.diagonal()))) or 1.0
    shift = 0.0
    while True:
        try:
            low = ic0_factor(a, shift)
            break
        except SolverError:
            shift = 1e-3 * maxd if shift == 0.0 else 2.0 * shift
            if shift > 1e6 * maxd:
                raise SolverError("incomplete Cholesky failed even with large shift")
    low_csr = sp.csr_matrix(low)
    up_csr = sp.csr_matrix(low.T)

    def apply(r):
        if np.iscomplexobj(r):
            return apply(r.real) + 1j * apply(r.imag)
        y = spsolve_triangular(low_csr, r, lower=True)
        return spsolve_triangular(up_csr, y, lower=False)

    return apply


PRECONDITIONERS = {
    "none": identity_preconditioner,
    "jacobi": jacobi_preconditioner,
    "ic0": ic0_preconditioner,
}


def make_preconditioner(kind: str, a: sp.spmatrix):
    try:
        factory = PRECONDITIONERS[kind]
    except KeyError:
        raise SolverError(f"unknown preconditioner {kind!r}") from None
    return factory(a)


def pcg_solve(a: sp.spmatrix, b: np.ndarray, precond=None, tol: float = 1e-8,
              max_iter: int = 2000):
    """Preconditioned CG on an SPD sparse system.

    Stops when ||b - A x|| / ||b|| <= tol.  Returns (x, iterations, history)
    where history holds the relative residual norm after each iteration.
    """
    b = np.asarray(b).reshape(-1)
    if precond is None:
        precond = identity_preconditioner(a)
    elif isinstance(precond, str):
        precond = make_preconditioner(precond, a)
    x = np.zeros_like(b, dtype=complex if np.iscomplexobj(b) else float)
    bnorm = np.linalg.norm(b)
    history = []
    if bnorm == 0:
        return x, 0, history
    r = b - a @ x
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    for it in range(1, max_iter + 1):
        q = a @ p
        pq = np.vdot(p, q).real
        if pq <= 0 or not np.isfinite(pq):
            raise SolverError("system is not positive definite on this right-hand side")
        alpha = rz / pq
        x = x + alpha * p
        r = r - alpha * q
        if not np.all(np.isfinite(r)):
            raise SolverError("non-finite iterate in CG")
        rel = np.linalg.norm(r) / bnorm
        history.append(rel)
        if rel <= tol:
            return x, it, history
        z = precond(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, max_iter, history
