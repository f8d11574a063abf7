"""The linearized field operator and the quadratic correction ``Delta_2``.

For a pair ``(x, y)`` the second jet derivatives of the kernel are collected in
``(1+m) x (1+m)`` blocks acting on jet values ``(a, u)``::

    B11(x, y) = [[L, d1L^T], [d1L, d1d1L]]     (both derivatives at x)
    B12(x, y) = [[L, d2L^T], [d1L, d1d2L]]     (u at x, v at y)
    B22(x, y) = B11(y, x)

so that ``nabla_{1,u} nabla_{2,v} L(x, y) = u(x)^T B12(x, y) v(y)`` and so on.
Jet coefficients are never differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instance import Instance
from .jets import JetSpace, blocks, jet_length


def pair_blocks(inst: Instance):
    """``(i, j, B11, B12)`` for all interacting ordered pairs."""
    p = inst.pairs
    P, m = p.g1.shape
    B11 = np.empty((P, 1 + m, 1 + m))
    B11[:, 0, 0] = p.L
    B11[:, 0, 1:] = p.g1
    B11[:, 1:, 0] = p.g1
    B11[:, 1:, 1:] = p.h11
    B12 = np.empty_like(B11)
    B12[:, 0, 0] = p.L
    B12[:, 0, 1:] = -p.g1
    B12[:, 1:, 0] = p.g1
    B12[:, 1:, 1:] = -p.h11
    return p.i, p.j, B11, B12


def _scatter_blocks(n_pts: int, k: int, rows, cols, mats) -> np.ndarray:
    """Dense matrix from ``(k x k)`` blocks placed at block positions ``(rows, cols)``."""
    out = np.zeros((n_pts * k, n_pts * k))
    r = (rows[:, None, None] * k + np.arange(k)[None, :, None])
    c = (cols[:, None, None] * k + np.arange(k)[None, None, :])
    np.add.at(out, (np.broadcast_to(r, mats.shape), np.broadcast_to(c, mats.shape)), mats)
    return out


@dataclass(frozen=True, eq=False)
class LinOp:
    """Matrix ``D`` with ``sum_i rho_i <u, Delta v>(x_i) = u^T W D v``.

    ``(D v)`` read blockwise is the jet ``(Delta v)(x_i)`` under the identity
    metric.
    """

    inst: Instance
    D: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return np.repeat(self.inst.weights, 1 + self.inst.dim)

    def apply(self, v) -> np.ndarray:
        return self.D @ np.asarray(v, dtype=float)

    def pointwise(self, u, v) -> np.ndarray:
        """``<u, Delta v>(x_i)`` for every point."""
        return np.einsum("ik,ik->i", blocks(self.inst, u), blocks(self.inst, self.apply(v)))

    def pairing(self, u, v, weight=None) -> float:
        """``sum_i weight_i rho_i <u, Delta v>(x_i)``."""
        rho = self.inst.weights if weight is None else self.inst.weights * weight
        return float(rho @ self.pointwise(u, v))

    def block(self, i: int, j: int) -> np.ndarray:
        k = 1 + self.inst.dim
        return self.D[i * k:(i + 1) * k, j * k:(j + 1) * k]


def assemble_delta(inst: Instance) -> LinOp:
    """Assemble the linearized field operator in the flat jet basis."""
    i, j, B11, B12 = pair_blocks(inst)
    rho = inst.weights
    k = 1 + inst.dim
    N = inst.n
    diag = np.zeros((N, k, k))
    np.add.at(diag, i, rho[j][:, None, None] * B11)
    diag[:, 0, 0] -= inst.s_param
    D = _scatter_blocks(N, k, i, j, rho[j][:, None, None] * B12)
    D += _scatter_blocks(N, k, np.arange(N), np.arange(N), diag)
    return LinOp(inst, D)


@dataclass(frozen=True, eq=False)
class Delta2Form:
    """Pointwise quadratic forms ``Delta_2[v, v](x_i)``.

    ``A[i]`` acts on ``v(x_i)``, pair entries ``C[p]`` couple ``v(x_i)`` with
    ``v(x_j)`` and ``E[p]`` act on ``v(x_j)``, for pair ``p = (i, j)``.
    """

    inst: Instance
    i: np.ndarray
    j: np.ndarray
    A: np.ndarray
    C: np.ndarray
    E: np.ndarray

    def values(self, v) -> np.ndarray:
        vb = blocks(self.inst, v)
        out = 0.5 * np.einsum("ia,iab,ib->i", vb, self.A, vb)
        out -= 0.5 * self.inst.s_param * vb[:, 0] ** 2
        cross = np.einsum("pa,pab,pb->p", vb[self.i], self.C, vb[self.j])
        pure = 0.5 * np.einsum("pa,pab,pb->p", vb[self.j], self.E, vb[self.j])
        out += np.bincount(self.i, weights=cross + pure, minlength=self.inst.n)
        return out

    def local_matrix(self, x: int, basis: np.ndarray | None = None):
        """Symmetric matrix of ``v -> Delta_2[v, v](x)``.

        Returns ``(cols, Q)`` where ``cols`` are the flat jet indices involved.
        If ``basis`` (rows = jets) is given, the form is pulled back to the
        coefficients of that basis and ``cols`` are basis row indices.
        """
        k = 1 + self.inst.dim
        sel = np.flatnonzero(self.i == x)
        pts = np.unique(np.concatenate([[x], self.j[sel]]))
        pos = {int(p): n for n, p in enumerate(pts)}
        Q = np.zeros((pts.size * k, pts.size * k))
        ix = slice(pos[x] * k, pos[x] * k + k)
        Q[ix, ix] += 0.5 * self.A[x]
        Q[pos[x] * k, pos[x] * k] -= 0.5 * self.inst.s_param
        for p in sel:
            jx = slice(pos[int(self.j[p])] * k, pos[int(self.j[p])] * k + k)
            Q[ix, jx] += 0.5 * self.C[p]
            Q[jx, ix] += 0.5 * self.C[p].T
            Q[jx, jx] += 0.5 * self.E[p]
        cols = (pts[:, None] * k + np.arange(k)[None, :]).ravel()
        if basis is None:
            return cols, Q
        sub = basis[:, cols]
        rows = np.flatnonzero(np.any(sub != 0, axis=1))
        Bs = sub[rows]
        return rows, Bs @ Q @ Bs.T


def assemble_delta2(inst: Instance) -> Delta2Form:
    i, j, B11, B12 = pair_blocks(inst)
    rho = inst.weights
    k = 1 + inst.dim
    A = np.zeros((inst.n, k, k))
    np.add.at(A, i, rho[j][:, None, None] * B11)
    # B22(x_i, x_j) = B11(x_j, x_i): flip the sign of the gradient part
    B22 = B11.copy()
    B22[:, 0, 1:] *= -1
    B22[:, 1:, 0] *= -1
    w = rho[j][:, None, None]
    return Delta2Form(inst, i, j, A, w * B12, w * B22)


def strong_residual(inst: Instance, op: LinOp, v, w, test: JetSpace | None = None) -> np.ndarray:
    """``(Delta v)(x_i) - w(x_i)`` restricted to the components admitted by ``test``."""
    r = op.apply(v) - np.asarray(w, dtype=float)
    if test is not None:
        r = r * test.mask.ravel()
    return r


def weak_residual(inst: Instance, op: LinOp, v, w, test: JetSpace, weight=None) -> float:
    """``max_u |<Delta u, v>_w - <u, w>_w| / (1 + |u| |v|)`` over the test basis."""
    if test.dim == 0:
        return 0.0
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    rho = inst.weights if weight is None else inst.weights * np.asarray(weight, dtype=float)
    Wd = np.repeat(rho, 1 + inst.dim)
    # <Delta u, v>_w = (D u)^T Wd v for all basis rows at once
    lhs = (test.basis @ op.D.T) @ (Wd * v)
    rhs = test.basis @ (Wd * w)
    norms = np.linalg.norm(test.basis, axis=1)
    return float(np.max(np.abs(lhs - rhs) / (1.0 + norms * np.linalg.norm(v))))
