"""Lens-shaped regions, the weak Cauchy problem and the cutoff step.

All jets handled by the solver live in the vary space: one admitted direction
per point (see :func:`cvp.jets.vary_directions`), so a vary jet is a vector of
``N`` coefficients.  Inhomogeneities may be full jets; only their component
along the vary direction enters the weak equations.

A lens is built either for the future problem (test jets vanish in the future
of ``t_max``, cutoff ``eta_{t_max}``) or for the past problem (test jets vanish
in the past of ``t_min``, cutoff ``1 - eta_{t_min}``).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.linalg import null_space

from .instance import Instance, compact_range_map
from .jets import JetSpace, direction_space, jet_length, vary_directions
from .linfield import LinOp, assemble_delta, assemble_delta2
from .surface_layers import (EPS_ETA, Foliation, HyperbolicityReport, _weighted_forms,
                             verify_hyperbolicity)

log = logging.getLogger(__name__)

EPS_SUPP = 1e-9
PINV_RTOL = 1e-10
DEFAULT_LAMBDA = 0.4


class LensError(RuntimeError):
    pass


class InconsistentSystemError(LensError):
    pass


def supp_eps(values, eps: float = EPS_SUPP, width: int | None = None) -> np.ndarray:
    """Indices of points where a jet exceeds ``eps`` times its largest pointwise norm.

    ``values`` is either a coefficient vector (one entry per point) or a flat
    jet; ``width`` is the block size of a flat jet.
    """
    v = np.asarray(values, dtype=float)
    norms = np.abs(v) if width is None else np.linalg.norm(v.reshape(-1, width), axis=1)
    top = norms.max(initial=0.0)
    if top == 0:
        return np.zeros(0, dtype=int)
    return np.flatnonzero(norms > eps * top)


@dataclass(frozen=True, eq=False)
class Context:
    """Per-instance data shared by all lenses: operator, vary frame and forms."""

    inst: Instance
    lam: float = DEFAULT_LAMBDA
    op: LinOp = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "op", assemble_delta(self.inst))

    @cached_property
    def d2(self):
        return assemble_delta2(self.inst)

    @cached_property
    def directions(self) -> np.ndarray:
        return vary_directions(self.inst, self.lam)

    @cached_property
    def vary(self) -> JetSpace:
        return direction_space(self.inst, self.directions)

    @property
    def E(self) -> np.ndarray:
        """``(N, N(1+m))``; row ``x`` is the vary direction at point ``x``."""
        return self.vary.basis

    @cached_property
    def delta_vary(self) -> np.ndarray:
        """``(Delta u)(x)`` projected on the vary direction, for vary jets ``u``."""
        return self.E @ self.op.D @ self.E.T

    def to_coeffs(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape == (self.inst.n,):
            return w
        return self.E @ w

    def to_jet(self, c) -> np.ndarray:
        return self.E.T @ np.asarray(c, dtype=float)

    def forms_vary(self, eta: np.ndarray, region: np.ndarray):
        S, P = _weighted_forms(self.inst, eta, 1.0 - eta, region)
        return self.E @ S @ self.E.T, self.E @ P @ self.E.T

    def commutator_jet(self, kappa: np.ndarray, c) -> np.ndarray:
        """Full jet ``[Delta, kappa] v`` for the vary jet with coefficients ``c``."""
        k = np.repeat(kappa, 1 + self.inst.dim)
        v = self.to_jet(c)
        D = self.op.D
        return D @ (k * v) - k * (D @ v)


def _null_basis(constraints: np.ndarray, free: np.ndarray, n: int) -> np.ndarray:
    """Orthonormal rows spanning ``{c : c = 0 off free, constraints c = 0}``."""
    free = np.asarray(free, dtype=int)
    if free.size == 0:
        return np.zeros((0, n))
    C = constraints[:, free]
    C = C[np.any(np.abs(C) > 0, axis=1)]
    sub = np.eye(free.size) if C.shape[0] == 0 else null_space(C, rcond=PINV_RTOL)
    out = np.zeros((sub.shape[1], n))
    out[:, free] = sub.T
    return out


@dataclass(eq=False)
class LensRegion:
    """A lens with its sets, test spaces and precomputed solution maps."""

    ctx: Context
    fol: Foliation
    orientation: str
    L: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    test_basis: np.ndarray
    jprime_zero: np.ndarray
    jprime_constraints: np.ndarray
    hyperbolicity: list = field(default_factory=list)

    @property
    def inst(self) -> Instance:
        return self.ctx.inst

    @property
    def U(self) -> np.ndarray:
        return self.fol.U

    @cached_property
    def eta_I(self) -> np.ndarray:
        return self.fol.eta_I()

    @cached_property
    def cutoff(self) -> np.ndarray:
        if self.orientation == "future":
            return self.fol.eta(self.fol.t_max)
        return 1.0 - self.fol.eta(self.fol.t_min)

    @cached_property
    def jprime_basis(self) -> np.ndarray:
        free = np.setdiff1d(np.arange(self.inst.n), self.jprime_zero)
        return _null_basis(self.jprime_constraints, free, self.inst.n)

    @cached_property
    def _system(self):
        """Weak system ``A v_L = T diag(eta_I rho) w`` and its weighted pseudo-inverse."""
        L = self.L
        rho = self.inst.weights
        wt = self.eta_I * rho
        T = self.test_basis
        A = (T @ self.ctx.delta_vary.T)[:, L] * wt[L]
        s = np.sqrt(wt[L])
        As = A / s
        if As.size == 0:
            pinv = np.zeros((L.size, T.shape[0]))
        else:
            pinv = linalg.pinv(As, rtol=PINV_RTOL) / s[:, None]
        return A, pinv, wt

    @property
    def system_matrix(self) -> np.ndarray:
        return self._system[0]

    def rhs(self, w_coeffs) -> np.ndarray:
        _, _, wt = self._system
        return self.test_basis @ (wt * w_coeffs)

    def solve_coeffs(self, w_coeffs) -> np.ndarray:
        """Minimal-norm weak solution on ``L`` (vary coefficients on all of M)."""
        A, pinv, wt = self._system
        v = np.zeros(self.inst.n)
        v[self.L] = pinv @ self.rhs(w_coeffs)
        return v

    @cached_property
    def glue_maps(self):
        """Matrices taking the coefficients of ``w`` on ``W`` to ``v_out`` and ``w~``.

        Returns ``(Vout, Wt)`` with shapes ``(N, |W|)`` and ``(N(1+m), |W|)``.
        """
        _, pinv, wt = self._system
        N = self.inst.n
        Vout = np.zeros((N, self.W.size))
        Vout[self.L] = pinv @ (self.test_basis[:, self.W] * wt[self.W])
        Vout *= (self.eta_I * self.cutoff)[:, None]
        vtil = np.zeros((N, self.W.size))
        vtil[self.L] = pinv @ (self.test_basis[:, self.W] * wt[self.W])
        vtil *= self.eta_I[:, None]
        k = np.repeat(self.cutoff, 1 + self.inst.dim)
        D = self.ctx.op.D
        J = self.ctx.E.T @ vtil
        Wt = D @ (k[:, None] * J) - k[:, None] * (D @ J)
        return Vout, Wt

    def to_dict(self) -> dict:
        f = self.fol
        return {"U": f.U.tolist(), "t_min": f.t_min, "t_max": f.t_max, "delta": f.delta,
                "n_grid": f.n_grid, "lam": self.ctx.lam, "orientation": self.orientation}


def _z_set(inst, U, eta, eps):
    below = U[eta[U] < 1 - eps]
    above = U[eta[U] > eps]
    return np.intersect1d(compact_range_map(inst, below), compact_range_map(inst, above))


def build_lens(ctx: Context, fol: Foliation, orientation: str = "future",
               check_hyperbolicity: bool = True, trials: int = 8, eps: float = EPS_ETA,
               seed: int = 42) -> LensRegion:
    """Materialize a lens: sets ``L, W, Z``, the test spaces and the hyperbolicity check.

    Raises
    ------
    LensError
        If condition (ii) of a local foliation fails (some point of ``L``
        interacts with a point outside ``U``), if hyperbolicity fails at a grid
        time, or if ``W`` is empty.
    """
    if orientation not in ("future", "past"):
        raise ValueError("orientation must be 'future' or 'past'")
    inst = ctx.inst
    N = inst.n
    U = fol.U
    L = fol.lens_set(eps)
    if L.size == 0:
        raise LensError("lens set L is empty")
    p = inst.pairs
    bad = np.flatnonzero(np.isin(p.i, L) & ~fol.in_U[p.j])
    if bad.size:
        k = bad[0]
        raise LensError(f"point {p.i[k]} of L interacts with point {p.j[k]} outside U")
    if not np.all(fol.in_U[L]):
        raise LensError("L is not contained in U")
    eta_I = fol.eta_I()
    if orientation == "future":
        t_edge = fol.t_max
        eta_edge = fol.eta(t_edge)
        Z = _z_set(inst, U, eta_edge, eps)
        kappa = eta_edge
        # test jets vanish where eta_{t_max} < 1
        test_free = L[1 - eta_edge[L] <= eps]
    else:
        t_edge = fol.t_min
        eta_edge = fol.eta(t_edge)
        Z = _z_set(inst, U, eta_edge, eps)
        kappa = 1.0 - eta_edge
        test_free = L[eta_edge[L] <= eps]
    W = np.setdiff1d(L[eta_I[L] >= 1 - eps], Z)
    if W.size == 0:
        raise LensError("W is empty for this lens")
    S_v, P_v = ctx.forms_vary(eta_edge, fol.in_U)
    test_basis = _null_basis(np.vstack([P_v, S_v]), test_free, N)
    if test_basis.shape[0] == 0:
        warnings.warn("boundary-adapted test space is zero-dimensional; solutions are trivial",
                      RuntimeWarning, stacklevel=2)
    # J': kappa * u must lie in the boundary-adapted test space, which is
    # supported in L; so u also vanishes on the collar K(L) \ L where kappa = 1
    collar = np.setdiff1d(compact_range_map(inst, L), L)
    collar = collar[kappa[collar] > eps]
    jp_zero = np.union1d(np.flatnonzero((kappa > eps) & (kappa < 1 - eps)), collar)
    jp_cons = np.vstack([P_v * kappa[None, :], S_v * kappa[None, :]])
    jp_cons = jp_cons[np.any(np.abs(jp_cons) > 0, axis=1)]
    reports = []
    if check_hyperbolicity:
        vary_U = direction_space(inst, ctx.directions, carrier=U)
        for t in fol.t_grid:
            rep = verify_hyperbolicity(inst, fol, float(t), vary_U, trials=trials, seed=seed, d2=ctx.d2)
            reports.append(rep)
            if not rep.ok:
                raise LensError(f"hyperbolicity fails at t={t:.6g} (certified mu={rep.mu_certified:.3g})")
    return LensRegion(ctx, fol, orientation, L, W, Z, test_basis, jp_zero, jp_cons, reports)


def band_lens(ctx: Context, t_min: float, t_max: float, delta: float = 1.0,
              orientation: str = "future", n_grid: int = 9, **kw) -> LensRegion:
    """Lens spanning the full spatial width between two times; ``U`` is ``K(L)``."""
    inst = ctx.inst
    probe = Foliation(inst, np.arange(inst.n), t_min, t_max, delta, n_grid)
    U = compact_range_map(inst, probe.lens_set())
    fol = Foliation(inst, U, t_min, t_max, delta, n_grid)
    return build_lens(ctx, fol, orientation, **kw)


@dataclass(frozen=True)
class LocalSolution:
    v: np.ndarray
    coeffs: np.ndarray
    gamma: float
    residual: float


def solve_weak(lens: LensRegion, w, check_support: bool = True) -> LocalSolution:
    """Weak solution of the Cauchy problem with zero data in the lens.

    ``w`` is a full jet or a vector of vary coefficients and must be supported
    in ``W``.  The returned solution has minimal norm in the ``eta_I``-weighted
    ``L^2(L)`` product.
    """
    ctx = lens.ctx
    c = ctx.to_coeffs(w)
    rho = lens.inst.weights
    if check_support:
        outside = np.setdiff1d(np.arange(lens.inst.n), lens.W)
        if np.linalg.norm(c[outside]) > 1e-12 * max(np.linalg.norm(c), 1e-300):
            raise LensError("inhomogeneity is not supported in W")
    A, _, wt = lens._system
    v = lens.solve_coeffs(c)
    b = lens.rhs(c)
    w_norm = float(np.sqrt(np.sum(wt * c ** 2)))
    res = float(np.linalg.norm(A @ v[lens.L] - b))
    if w_norm == 0:
        return LocalSolution(ctx.to_jet(v), v, 0.0, res)
    if res > 1e-8 * w_norm:
        raise InconsistentSystemError(
            f"weak system is inconsistent: residual {res:.3g} vs |w| = {w_norm:.3g}")
    v_norm = float(np.sqrt(np.sum(wt * v ** 2)))
    return LocalSolution(ctx.to_jet(v), v, v_norm / w_norm, res / w_norm)


@dataclass(frozen=True)
class GlueStepResult:
    v_out: np.ndarray
    w_tilde: np.ndarray
    v_out_coeffs: np.ndarray
    support_ok: bool
    weak_error: float


def glue_step(lens: LensRegion, w, check: bool = True, tol: float = 1e-8) -> GlueStepResult:
    """Solve in the lens, absorb the weight, cut off, and return the commutator source.

    Checks that ``w~`` is supported in ``Z`` and that the modified weak identity
    holds on the ``J'`` basis.
    """
    ctx = lens.ctx
    inst = lens.inst
    c = ctx.to_coeffs(w)
    sol = solve_weak(lens, c)
    vtil = lens.eta_I * sol.coeffs
    v_out = lens.cutoff * vtil
    w_tilde = ctx.commutator_jet(lens.cutoff, vtil)
    if not check:
        return GlueStepResult(ctx.to_jet(v_out), w_tilde, v_out, True, float("nan"))
    supp = supp_eps(w_tilde, width=1 + inst.dim)
    support_ok = bool(np.all(np.isin(supp, lens.Z)))
    if not support_ok:
        raise LensError(f"commutator source leaks outside Z at points {np.setdiff1d(supp, lens.Z)[:5]}")
    err = weak_identity_error(lens, v_out, c, ctx.to_coeffs(w_tilde))
    if err > tol:
        raise LensError(f"modified weak identity violated: {err:.3g}")
    return GlueStepResult(ctx.to_jet(v_out), w_tilde, v_out, support_ok, err)


def weak_identity_error(lens: LensRegion, v_coeffs, w_coeffs, wt_coeffs) -> float:
    """``max_u |<Delta u, v> - <u, w> - <u, w~>|`` over the ``J'`` basis, relative to ``|w|``."""
    ctx = lens.ctx
    rho = lens.inst.weights
    B = lens.jprime_basis
    if B.shape[0] == 0:
        return 0.0
    lhs = (B @ ctx.delta_vary.T) @ (rho * v_coeffs)
    rhs = B @ (rho * (w_coeffs + wt_coeffs))
    scale = max(float(np.sqrt(rho @ w_coeffs ** 2)), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)
