"""Foliations, surface layer forms, the energy identity and hyperbolicity."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .instance import Instance
from .jets import JetSpace, blocks, jet_length
from .linfield import Delta2Form, LinOp, _scatter_blocks, assemble_delta, assemble_delta2, pair_blocks

EPS_ETA = 1e-9


def smoothstep(z):
    """Quintic smoothstep, ``C^2`` on the real line."""
    z = np.clip(z, 0.0, 1.0)
    return z ** 3 * (z * (6.0 * z - 15.0) + 10.0)


def smoothstep_deriv(z):
    inside = (z > 0) & (z < 1)
    zc = np.clip(z, 0.0, 1.0)
    return np.where(inside, 30.0 * zc ** 2 * (zc - 1.0) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class Foliation:
    """Time-coordinate cutoffs ``eta_t(x) = s((t - tau(x)) / delta)``.

    ``eta_t`` equals one in the past and zero in the future of the layer
    around ``tau = t``.  The functions are defined on all of ``M``; the region
    ``U`` restricts the surface layer sums.
    """

    inst: Instance
    U: np.ndarray
    t_min: float
    t_max: float
    delta: float = 1.0
    n_grid: int = 9
    in_U: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        U = np.asarray(sorted(set(int(u) for u in self.U)), dtype=int)
        object.__setattr__(self, "U", U)
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not self.t_min <= self.t_max:
            raise ValueError("need t_min <= t_max")
        mask = np.zeros(self.inst.n, dtype=bool)
        mask[U] = True
        object.__setattr__(self, "in_U", mask)

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_grid)

    def eta(self, t: float) -> np.ndarray:
        return smoothstep((t - self.inst.times) / self.delta)

    def theta(self, t: float) -> np.ndarray:
        return smoothstep_deriv((t - self.inst.times) / self.delta) / self.delta

    def eta_I(self) -> np.ndarray:
        return self.eta(self.t_max) - self.eta(self.t_min)

    def lens_set(self, eps: float = EPS_ETA) -> np.ndarray:
        """Points in the union of the supports of ``theta_t`` over ``t`` in ``I``."""
        return np.flatnonzero(self.eta_I() > eps)

    def attains_bounds(self, t: float, eps: float = EPS_ETA) -> bool:
        e = self.eta(t)[self.U]
        return bool(e.min() <= eps and e.max() >= 1 - eps)


@dataclass(frozen=True, eq=False)
class SoftForms:
    """``sigma`` and ``inner`` on full jets; ``*_vary`` pulled back to a vary basis."""

    t: float
    sigma: np.ndarray
    inner: np.ndarray
    sigma_vary: np.ndarray | None = None
    inner_vary: np.ndarray | None = None


def _weighted_forms(inst: Instance, wx: np.ndarray, wy: np.ndarray, region=None):
    """Surface layer forms with pair weight ``wx(x) wy(y)`` over ``region x region``.

    sigma(u, v) = sum rho rho wx(x) wy(y) [u(x)^T B12 v(y) - v(x)^T B12 u(y)]
    inner(u, v) = sum rho rho wx(x) wy(y) [u(x)^T B11 v(x) - u(y)^T B22 v(y)]
    """
    i, j, B11, B12 = pair_blocks(inst)
    if region is not None:
        keep = region[i] & region[j]
        i, j, B11, B12 = i[keep], j[keep], B11[keep], B12[keep]
    rho = inst.weights
    c = (rho[i] * rho[j] * wx[i] * wy[j])[:, None, None]
    nz = c[:, 0, 0] != 0
    i, j, B11, B12, c = i[nz], j[nz], B11[nz], B12[nz], c[nz]
    k = 1 + inst.dim
    N = inst.n
    S = _scatter_blocks(N, k, i, j, c * B12)
    S -= S.T
    # B22(x, y) = B11(y, x) sits on the y diagonal block
    B22 = B11.copy()
    B22[:, 0, 1:] *= -1
    B22[:, 1:, 0] *= -1
    P = _scatter_blocks(N, k, i, i, c * B11) - _scatter_blocks(N, k, j, j, c * B22)
    return S, P


def sharp_forms(inst: Instance, omega):
    """Symplectic form and surface layer inner product of the set ``omega``.

    Returns ``(sigma, inner)`` as matrices on flat jets.
    """
    chi = np.zeros(inst.n)
    chi[np.asarray(list(omega), dtype=int)] = 1.0
    return _weighted_forms(inst, chi, 1.0 - chi)


def soft_forms(inst: Instance, fol: Foliation, t: float, vary: JetSpace | None = None) -> SoftForms:
    """Softened forms at time ``t``; restricted to ``vary`` if given."""
    eta = fol.eta(t)
    S, P = _weighted_forms(inst, eta, 1.0 - eta, fol.in_U)
    if vary is None:
        return SoftForms(t, S, P)
    B = vary.basis
    return SoftForms(t, S, P, B @ S @ B.T, B @ P @ B.T)


def energy_identity_check(inst: Instance, fol: Foliation, v, t: float, h: float,
                          op: LinOp | None = None, d2: Delta2Form | None = None):
    """Compare ``d/dt (v, v)^t`` (central difference) with the energy identity.

    Returns ``(lhs, rhs, gap)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    v = np.asarray(v, dtype=float)
    op = assemble_delta(inst) if op is None else op
    d2 = assemble_delta2(inst) if d2 is None else d2

    def energy(s):
        eta = fol.eta(s)
        _, P = _weighted_forms(inst, eta, 1.0 - eta, fol.in_U)
        return float(v @ P @ v)

    lhs = (energy(t + h) - energy(t - h)) / (2 * h)
    wt = fol.theta(t) * inst.weights * fol.in_U
    b = blocks(inst, v)[:, 0]
    rhs = float(2 * wt @ op.pointwise(v, v) - 2 * wt @ d2.values(v) + inst.s_param * wt @ b ** 2)
    return lhs, rhs, abs(lhs - rhs)


@dataclass(frozen=True)
class HyperbolicityReport:
    t: float
    C: float
    mu_certified: float
    mu_sampled: float
    ok: bool
    witness: np.ndarray | None = None
    margin: float = float("nan")
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "t": self.t, "C": self.C, "mu_certified": self.mu_certified,
            "mu_sampled": self.mu_sampled, "ok": self.ok, "margin": self.margin,
            "degenerate": self.degenerate,
            "witness": None if self.witness is None else self.witness.tolist(),
        }


def hyperbolicity_bound(A, theta_rho, local_forms, trials: int = 16, seed: int = 42,
                        iters: int = 200, tol: float = 1e-12):
    """Lower bound for ``inf_v  v^T A v / (v^T Theta v + sum_x w_x |v^T Q_x v|)``.

    Parameters
    ----------
    A : (n, n) symmetric
    theta_rho : (n,) or (n, n)
        ``Theta`` as its diagonal or as a symmetric positive semidefinite matrix
    local_forms : list of ``(w_x, idx, Q_x)``; ``Q_x`` acts on coefficients ``idx``
    trials : number of random restarts for the sampled minimum

    Returns
    -------
    mu_cert, mu_sampled, witness
        ``mu_cert`` is certified: ``|v^T Q v| <= v^T |Q| v`` turns the problem
        into a generalized eigenvalue problem.  ``mu_sampled`` is the smallest
        ratio found by projected gradient descent on the unit sphere.  If the
        left side fails to be positive where the right side is, the
        certified bound is ``<= 0`` and ``witness`` is a violating vector.
    """
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    Th = np.asarray(theta_rho, dtype=float)
    Th = np.diag(Th) if Th.ndim == 1 else 0.5 * (Th + Th.T)
    R = Th.copy()
    for w, idx, Q in local_forms:
        ev, V = linalg.eigh(0.5 * (Q + Q.T))
        R[np.ix_(idx, idx)] += w * (V * np.abs(ev)) @ V.T
    active = np.flatnonzero((np.abs(A).sum(1) > 0) | (np.abs(R).sum(1) > 0))
    if active.size == 0:
        return np.inf, np.inf, None
    Aa, Ra = A[np.ix_(active, active)], R[np.ix_(active, active)]
    scale = max(np.abs(Aa).max(), np.abs(Ra).max())
    evA, VA = linalg.eigh(Aa)
    witness = None
    if evA[0] < -tol * scale:
        witness = np.zeros(n)
        witness[active] = VA[:, 0]
        return evA[0] / max(witness[active] @ Ra @ witness[active], tol * scale), evA[0], witness
    null = evA <= tol * scale
    if np.any(null):
        Vn = VA[:, null]
        Rn = Vn.T @ Ra @ Vn
        if np.abs(Rn).max() > tol * scale:
            ev, V = linalg.eigh(Rn)
            witness = np.zeros(n)
            witness[active] = Vn @ V[:, -1]
            return 0.0, 0.0, witness
    keep = ~null
    Vk = VA[:, keep]
    # generalized problem on the range of A: R y = nu A y, mu = 1 / nu_max
    Ak = np.diag(evA[keep])
    Rk = Vk.T @ Ra @ Vk
    nu = linalg.eigh(Rk, Ak, eigvals_only=True)
    mu_cert = np.inf if nu[-1] <= 0 else 1.0 / nu[-1]

    def ratio_and_grad(y):
        z = np.zeros(n)
        z[active] = y
        den = z @ Th @ z
        gden = 2 * Th @ z
        for w, idx, Q in local_forms:
            q = z[idx] @ Q @ z[idx]
            den += w * abs(q)
            gden[idx] += 2 * w * np.sign(q) * (Q @ z[idx])
        num = y @ Aa @ y
        if den <= 0:
            return np.inf, np.zeros_like(y)
        return num / den, (2 * Aa @ y * den - num * gden[active]) / den ** 2

    rng = np.random.default_rng(seed)
    best = np.inf
    best_y = None
    for _ in range(max(trials, 0)):
        y = rng.normal(size=active.size)
        y /= np.linalg.norm(y)
        f, g = ratio_and_grad(y)
        step = 0.1
        for _ in range(iters):
            g = g - (g @ y) * y
            if np.linalg.norm(g) < 1e-12:
                break
            y_new = y - step * g
            y_new /= np.linalg.norm(y_new)
            f_new, g_new = ratio_and_grad(y_new)
            if f_new < f:
                y, f, g = y_new, f_new, g_new
                step *= 1.5
            else:
                step *= 0.5
                if step < 1e-12:
                    break
        if f < best:
            best, best_y = f, y
    if best_y is not None and best < 0:
        witness = np.zeros(n)
        witness[active] = best_y
    return mu_cert, best, witness


def hyperbolicity_data(inst: Instance, fol: Foliation, t: float, vary: JetSpace,
                       d2: Delta2Form | None = None):
    """Left form, ``Theta`` diagonal and local ``Delta_2`` forms in vary coefficients."""
    d2 = assemble_delta2(inst) if d2 is None else d2
    forms = soft_forms(inst, fol, t, vary)
    A = forms.inner_vary
    th = fol.theta(t) * inst.weights
    B = vary.basis
    # sum_x theta rho |v(x)|^2 pulled back to basis coefficients
    theta_rho = (B * np.repeat(th * fol.in_U, 1 + inst.dim)) @ B.T
    if np.allclose(theta_rho, np.diag(np.diag(theta_rho)), rtol=0, atol=0):
        theta_rho = np.diag(theta_rho).copy()
    local = []
    for x in np.flatnonzero((th > 0) & fol.in_U):
        rows, Q = d2.local_matrix(int(x), vary.basis)
        local.append((float(th[x]), rows, Q))
    return A, theta_rho, local


def verify_hyperbolicity(inst: Instance, fol: Foliation, t: float, vary: JetSpace,
                         trials: int = 16, seed: int = 42, d2: Delta2Form | None = None,
                         ) -> HyperbolicityReport:
    """Search the best constant ``C`` in the hyperbolicity inequality at time ``t``.

    ``vary`` is the admitted jet space; its basis rows are the test vectors.
    The reported ``C`` comes from the certified bound.
    """
    A, theta_rho, local = hyperbolicity_data(inst, fol, t, vary, d2)
    if not np.any(theta_rho > 0):
        return HyperbolicityReport(t, 0.0, np.inf, np.inf, True, None, np.inf, degenerate=True)
    mu_c, mu_s, wit = hyperbolicity_bound(A, theta_rho, local, trials, seed)
    ok = bool(mu_c > 0 and wit is None)
    C = float(1 / np.sqrt(mu_c)) if mu_c > 0 and np.isfinite(mu_c) else (0.0 if mu_c == np.inf else np.inf)
    witness = None if wit is None else vary.basis.T @ wit
    return HyperbolicityReport(t, C, float(mu_c), float(mu_s), ok, witness, float(min(mu_c, mu_s)))
