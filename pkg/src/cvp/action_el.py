"""Action, the function ``ell``, Euler-Lagrange checks and critical weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import nnls

from .instance import Instance, InstanceError
from .jets import JetSpace, blocks


@dataclass(frozen=True)
class ElReport:
    ell: np.ndarray
    grad_ell: np.ndarray
    max_abs_ell: float
    max_grad_norm_on_test: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "ell": self.ell.tolist(),
            "grad_ell": self.grad_ell.tolist(),
            "max_abs_ell": self.max_abs_ell,
            "max_grad_norm_on_test": self.max_grad_norm_on_test,
        }


def eval_action(inst: Instance) -> float:
    """``S = sum_ij rho_i rho_j L(x_i, x_j)``."""
    p = inst.pairs
    return float(np.sum(inst.weights[p.i] * inst.weights[p.j] * p.L))


def _ell_and_grad(inst: Instance):
    p = inst.pairs
    rho = inst.weights
    ell = np.bincount(p.i, weights=p.L * rho[p.j], minlength=inst.n) - inst.s_param
    grad = np.zeros((inst.n, inst.dim))
    np.add.at(grad, p.i, p.g1 * rho[p.j][:, None])
    return ell, grad


def eval_ell(inst: Instance, test: JetSpace | None = None) -> ElReport:
    """``ell_i`` and its gradient ``D ell(x_i)`` at every point."""
    ell, grad = _ell_and_grad(inst)
    worst = float("nan")
    if test is not None:
        worst = _worst_el(inst, test, ell, grad)
    return ElReport(ell, grad, float(np.max(np.abs(ell))), worst)


def _worst_el(inst, test, ell, grad) -> float:
    if test.dim == 0:
        return 0.0
    # a_i ell_i + <u_i, D ell_i> for every basis jet at once
    g = np.concatenate([ell[:, None], grad], axis=1).ravel()
    return float(np.max(np.abs(test.basis * g[None, :])))


def check_restricted_el(inst: Instance, test: JetSpace, tol: float = 1e-10):
    """Check ``a_i ell(x_i) + <u_i, D ell(x_i)> = 0`` for all basis jets and points.

    Returns ``(passed, worst)``.
    """
    ell, grad = _ell_and_grad(inst)
    worst = _worst_el(inst, test, ell, grad)
    return worst <= tol, worst


def translation_test_space(inst: Instance, points) -> JetSpace:
    """Pure translation directions ``(0, e_k)`` at the given points, all axes."""
    from .jets import build_space, jet_length
    m = inst.dim
    points = np.asarray(sorted(set(int(p) for p in points)), dtype=int)
    # forbid the scalar component on the carrier
    rows = np.zeros((points.size, jet_length(inst)))
    rows[np.arange(points.size), points * (1 + m)] = 1.0
    return build_space(inst, points, None, rows)


def shrink_test_directions(inst: Instance, carrier, tol: float = 1e-10) -> dict:
    """Axes admissible at each point, keeping only those along which ``|D ell| <= tol``."""
    _, grad = _ell_and_grad(inst)
    return {int(i): [ax for ax in range(inst.dim) if abs(grad[i, ax]) <= tol] for i in carrier}


def solve_critical_weights(inst: Instance, rtol: float = 1e-12, max_refine: int = 8) -> Instance:
    """Weights with ``sum_j L(x_i, x_j) rho_j = s`` at every point.

    The linear system is solved by LU with iterative refinement.  If the
    solution has a non-positive entry, a nonnegative least-squares solve
    confirms that no admissible positive solution exists and an error is
    raised.
    """
    K = inst.kernel_matrix
    b = np.full(inst.n, inst.s_param)
    if inst.s_param <= 0:
        raise InstanceError("critical weights need s_param > 0")
    try:
        lu = linalg.lu_factor(K, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise InstanceError(f"kernel matrix cannot be factorized: {exc}") from None
    diag = np.abs(np.diag(lu[0]))
    if diag.min() <= 1e-14 * diag.max():
        raise InstanceError("kernel matrix is singular on the point set")
    rho = linalg.lu_solve(lu, b)
    for _ in range(max_refine):
        r = b - K @ rho
        if np.linalg.norm(r) <= rtol * np.linalg.norm(b) * 1e-2:
            break
        rho = rho + linalg.lu_solve(lu, r)
    if not np.all(np.isfinite(rho)):
        raise InstanceError("kernel matrix is singular on the point set")
    if np.any(rho <= 0):
        rho_nn, res = nnls(K, b)
        if res > rtol * np.linalg.norm(b) or np.any(rho_nn <= 0):
            bad = int(np.argmin(rho))
            raise InstanceError(
                f"no strictly positive critical weights: point {bad} would get weight {rho[bad]:.6g}")
        rho = rho_nn
    resid = np.linalg.norm(b - K @ rho) / np.linalg.norm(b)
    if resid > rtol:
        raise InstanceError(f"critical-weight residual {resid:.3g} exceeds {rtol:g}")
    return inst.with_weights(rho)


def _varied_value(inst: Instance, v, tau: float, at) -> np.ndarray:
    """``(1 + tau b_i) [a_i ell~(x~_i) + <u_i, D ell~(x~_i)>]`` for the varied measure."""
    vb = blocks(inst, v)
    b, bvec = vb[:, 0], vb[:, 1:]
    new_pts = inst.points + tau * bvec
    new_w = inst.weights * (1.0 + tau * b)
    if np.any(new_w <= 0):
        raise ValueError("step too large: varied weights become non-positive")
    varied = inst.with_points(new_pts).with_weights(new_w)
    ell, grad = _ell_and_grad(varied)
    a, u = at[:, 0], at[:, 1:]
    return (1.0 + tau * b) * (a * ell + np.einsum("ik,ik->i", u, grad))


def variation_fd_oracle(inst: Instance, v, h: float, u=None) -> np.ndarray:
    """Finite-difference derivative of the restricted EL expression along a variation.

    The measure is pushed forward by ``x -> x + tau v(x)`` and rescaled by
    ``1 + tau b(x)``.  The test jet ``u`` (default: ``v``) is held fixed.  The
    derivative at ``tau = 0`` uses the fourth-order central stencil and equals
    ``<u, Delta v>(x_i)`` for every point.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    at = blocks(inst, v if u is None else u)
    vals = {k: _varied_value(inst, v, k * h, at) for k in (-2, -1, 1, 2)}
    return (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * h)
