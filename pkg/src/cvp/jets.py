"""Jets on a finite point cloud and the subspaces used for testing and varying.

A jet assigns to every point a scalar ``a`` and a vector ``u`` in ``R^m``.  It
is stored as a flat vector of length ``N*(1+m)`` in the order
``[a_1, u_1^1, ..., u_1^m, a_2, ...]``.  The metric on each fibre is the
identity, so the pointwise product is the Euclidean product of the
``(1+m)``-blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space

from .instance import Instance

RANK_RTOL = 1e-10


def jet_length(inst: Instance) -> int:
    return inst.n * (1 + inst.dim)


def blocks(inst: Instance, v) -> np.ndarray:
    """View of a flat jet as an ``(N, 1+m)`` array."""
    v = np.asarray(v, dtype=float)
    if v.shape != (jet_length(inst),):
        raise ValueError(f"jet must have length {jet_length(inst)}, got shape {v.shape}")
    return v.reshape(inst.n, 1 + inst.dim)


def make_jet(inst: Instance, a=None, u=None) -> np.ndarray:
    """Assemble a flat jet from scalar parts ``a (N,)`` and vector parts ``u (N, m)``."""
    out = np.zeros((inst.n, 1 + inst.dim))
    if a is not None:
        out[:, 0] = a
    if u is not None:
        out[:, 1:] = u
    return out.ravel()


def pointwise_product(inst: Instance, v, w, i: int) -> float:
    """``b_i b~_i + <v_i, w_i>`` with the identity metric."""
    return float(blocks(inst, v)[i] @ blocks(inst, w)[i])


def l2_product(inst: Instance, v, w, weight=None) -> float:
    """``sum_i weight_i rho_i <v, w>(x_i)``."""
    pw = np.einsum("ik,ik->i", blocks(inst, v), blocks(inst, w))
    rho = inst.weights if weight is None else inst.weights * np.asarray(weight, dtype=float)
    return float(rho @ pw)


def l2_gram_weights(inst: Instance, weight=None) -> np.ndarray:
    """Diagonal of the L2 Gram matrix in flat jet coordinates."""
    rho = inst.weights if weight is None else inst.weights * np.asarray(weight, dtype=float)
    return np.repeat(rho, 1 + inst.dim)


@dataclass(frozen=True, eq=False)
class JetSpace:
    """Subspace of jets given by a component mask and linear constraints.

    ``basis`` has shape ``(dim, N*(1+m))`` with orthonormal rows.
    """

    mask: np.ndarray
    constraints: np.ndarray
    basis: np.ndarray
    carrier: np.ndarray

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def projector(self) -> np.ndarray:
        return self.basis.T @ self.basis

    def project(self, v) -> np.ndarray:
        return self.basis.T @ (self.basis @ np.asarray(v, dtype=float))

    def contains(self, v, tol: float = 1e-10) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.linalg.norm(v - self.project(v)) <= tol * max(1.0, np.linalg.norm(v)))


def _mask_from(inst: Instance, carrier, vector_mask) -> np.ndarray:
    N, m = inst.n, inst.dim
    mask = np.zeros((N, 1 + m), dtype=bool)
    carrier = np.asarray(sorted(set(int(c) for c in carrier)), dtype=int)
    mask[carrier, 0] = True
    if vector_mask is None:
        mask[carrier, 1:] = True
    elif isinstance(vector_mask, dict):
        for i, axes in vector_mask.items():
            if int(i) in set(carrier.tolist()):
                for ax in axes:
                    mask[int(i), 1 + int(ax)] = True
    else:
        # same axis set at every carrier point
        for ax in vector_mask:
            mask[carrier, 1 + int(ax)] = True
    return mask


def build_space(inst: Instance, carrier, vector_mask=None, constraints=None) -> JetSpace:
    """Orthonormal basis of masked jets lying in the kernel of ``constraints``.

    Parameters
    ----------
    carrier : iterable of int
        Points on which the jets may be nonzero.
    vector_mask : None, iterable of axes, or dict point -> axes
        Admitted vector components.  ``None`` admits all axes, an empty
        iterable gives scalar-only jets.
    constraints : array_like, shape (k, N*(1+m)), optional
        Homogeneous linear conditions ``C v = 0``.
    """
    carrier = np.asarray(sorted(set(int(c) for c in carrier)), dtype=int)
    if carrier.size == 0:
        raise ValueError("carrier must be nonempty")
    n = jet_length(inst)
    mask = _mask_from(inst, carrier, vector_mask)
    cols = np.flatnonzero(mask.ravel())
    if constraints is None or np.size(constraints) == 0:
        C = np.zeros((0, n))
        sub = np.eye(cols.size)
    else:
        C = np.atleast_2d(np.asarray(constraints, dtype=float))
        if C.shape[1] != n:
            raise ValueError(f"constraints need {n} columns, got {C.shape[1]}")
        Cs = C[:, cols]
        Cs = Cs[np.any(Cs != 0, axis=1)]
        if Cs.shape[0] == 0:
            sub = np.eye(cols.size)
        else:
            sub = null_space(Cs, rcond=RANK_RTOL)
    basis = np.zeros((sub.shape[1], n))
    basis[:, cols] = sub.T
    return JetSpace(mask, C, basis, carrier)


def direction_space(inst: Instance, directions, carrier=None) -> JetSpace:
    """One admitted direction per point, given as an ``(N, 1+m)`` array.

    The basis is the normalized direction at each carrier point, in point
    order, so coefficient ``k`` of a jet in this space belongs to point
    ``carrier[k]``.
    """
    d = np.asarray(directions, dtype=float)
    N, m = inst.n, inst.dim
    if d.shape != (N, 1 + m):
        raise ValueError(f"directions must have shape {(N, 1 + m)}")
    carrier = np.arange(N) if carrier is None else np.asarray(sorted(set(int(c) for c in carrier)), dtype=int)
    norms = np.linalg.norm(d[carrier], axis=1)
    if np.any(norms == 0):
        raise ValueError("directions must be nonzero on the carrier")
    basis = np.zeros((carrier.size, N * (1 + m)))
    for k, i in enumerate(carrier):
        basis[k, i * (1 + m):(i + 1) * (1 + m)] = d[i] / norms[k]
    mask = np.zeros((N, 1 + m), dtype=bool)
    mask[carrier] = d[carrier] != 0
    return JetSpace(mask, np.zeros((0, N * (1 + m))), basis, carrier)


def vary_directions(inst: Instance, lam: float) -> np.ndarray:
    """Per-point direction ``(1, lam * e_t)`` mixing the scalar with the time component."""
    d = np.zeros((inst.n, 1 + inst.dim))
    d[:, 0] = 1.0
    d[:, 1] = lam
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def save_jet(v, path) -> None:
    from .instance import dumps
    from pathlib import Path
    Path(path).write_text(dumps([float(x) for x in np.asarray(v).ravel()]))


def load_jet(inst: Instance, path) -> np.ndarray:
    import json
    from pathlib import Path
    try:
        arr = np.asarray(json.loads(Path(path).read_text()), dtype=float)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if arr.shape != (jet_length(inst),):
        raise ValueError(f"{path}: jet must be a flat array of length {jet_length(inst)}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: jet has non-finite entries")
    return arr
