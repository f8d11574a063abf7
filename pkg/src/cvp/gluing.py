"""Coverings by lenses, strong causality and the inductive global solve."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .instance import compact_range_map
from .local_solver import (EPS_SUPP, Context, LensError, LensRegion, _null_basis, band_lens,
                           supp_eps)


class CoveringError(RuntimeError):
    pass


class GlueError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoveringTemplate:
    """Stacked full-width lenses of a fixed height.

    Consecutive lenses are shifted by ``stride``.  Each covering set ``W_l`` is
    the slice of the lens's maximal ``W`` within ``stride`` of its initial time
    (the bottom for the future problem, the top for the past problem), so the
    ``W_l`` tile the time axis without overlap.  With ``height`` a multiple of
    ``stride`` the collar and boundary layers removed from the test spaces of
    different lenses coincide, which keeps the common test space large.
    """

    height: float = 4.0
    stride: float | None = 2.0
    delta: float = 1.0
    lam: float = 0.4
    n_grid: int = 9
    trials: int = 8
    check_hyperbolicity: bool = True

    @property
    def step(self) -> float:
        return self.height - 1.0 if self.stride is None else float(self.stride)

    def slice_w(self, lens: LensRegion) -> np.ndarray:
        tau = lens.inst.times[lens.W]
        f = lens.fol
        if lens.orientation == "future":
            keep = tau < f.t_min + self.step - 1e-9
        else:
            keep = tau > f.t_max - f.delta - self.step + 1e-9
        return lens.W[keep]

    def to_dict(self) -> dict:
        return {"height": self.height, "stride": self.step, "delta": self.delta, "lam": self.lam,
                "n_grid": self.n_grid, "trials": self.trials,
                "check_hyperbolicity": self.check_hyperbolicity}

    @classmethod
    def from_dict(cls, d: dict) -> "CoveringTemplate":
        allowed = {"height", "stride", "delta", "lam", "n_grid", "trials", "check_hyperbolicity"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown covering field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class Covering:
    ctx: Context
    lenses: list
    orientation: str
    margin: np.ndarray
    edges: np.ndarray
    W: list
    template: CoveringTemplate | None = None

    @property
    def inst(self):
        return self.ctx.inst

    @cached_property
    def reach(self) -> np.ndarray:
        """``reach[a, b]``: lens ``b`` is future-related to lens ``a`` (chains of length >= 2)."""
        return _closure(self.edges)

    @cached_property
    def owner(self) -> np.ndarray:
        """First lens whose ``W`` contains each point, ``-1`` for none; margin points are parked."""
        own = np.full(self.inst.n, -1)
        for k, W in enumerate(self.W):
            free = W[own[W] < 0]
            own[free] = k
        own[self.margin] = -1
        return own

    @cached_property
    def w_union(self) -> np.ndarray:
        return np.unique(np.concatenate(self.W))

    def jprime_constraints(self):
        zero = np.unique(np.concatenate([l.jprime_zero for l in self.lenses]))
        cons = np.vstack([l.jprime_constraints for l in self.lenses])
        return zero, cons

    def test_space(self) -> np.ndarray:
        """Orthonormal basis of the common test space, away from ``K(margin)``."""
        return common_test_space([self])

    def certificate(self) -> dict:
        return {
            "orientation": self.orientation,
            "n_lenses": len(self.lenses),
            "lenses": [l.to_dict() for l in self.lenses],
            "edges": [[int(a), int(b)] for a, b in zip(*np.nonzero(self.edges))],
            "W": [w.tolist() for w in self.W],
            "margin": self.margin.tolist(),
            "strongly_causal": True,
        }


def _closure(adj: np.ndarray) -> np.ndarray:
    R = adj.astype(bool).copy()
    while True:
        R2 = R | ((R.astype(np.int64) @ R.astype(np.int64)) > 0)
        if np.array_equal(R2, R):
            return R
        R = R2


def common_test_space(coverings) -> np.ndarray:
    """Intersection of all ``J'_L`` of the given coverings, vanishing on ``K(margins)``."""
    inst = coverings[0].inst
    zeros, cons = [], []
    for cov in coverings:
        z, c = cov.jprime_constraints()
        zeros += [z, compact_range_map(inst, cov.margin)]
        cons.append(c)
    zero = np.unique(np.concatenate(zeros)).astype(int)
    free = np.setdiff1d(np.arange(inst.n), zero)
    return _null_basis(np.vstack(cons), free, inst.n)


def build_covering(ctx: Context, template: CoveringTemplate = CoveringTemplate(),
                   orientation: str = "future") -> Covering:
    """Stack band lenses along the time axis and certify the covering.

    The margin (``F_top`` for the future problem, ``F_bottom`` for the past) is
    the band of points within kernel range of the last time boundary.
    """
    inst = ctx.inst
    if inst.periodic[0] is not None:
        raise CoveringError("time-periodic instances admit no strongly causal covering")
    tau = inst.times
    t0, t1 = float(tau.min()), float(tau.max())
    r = inst.kernel.range
    H, s = float(template.height), float(template.step)
    if s <= 0 or H <= 0:
        raise CoveringError("height and stride must be positive")
    if orientation == "future":
        margin = np.flatnonzero(t1 - tau < r)
    elif orientation == "past":
        margin = np.flatnonzero(tau - t0 < r)
    else:
        raise ValueError("orientation must be 'future' or 'past'")
    need = np.setdiff1d(np.arange(inst.n), margin)
    covered = np.zeros(inst.n, dtype=bool)
    lenses, Ws = [], []
    k = 0
    kw = dict(delta=template.delta, orientation=orientation, n_grid=template.n_grid,
              check_hyperbolicity=template.check_hyperbolicity, trials=template.trials)
    max_lenses = int(np.ceil((t1 - t0 + 2 * H) / s)) + 2
    while not covered[need].all():
        if k > max_lenses:
            break
        if orientation == "future":
            a = t0 + k * s
            b = a + H
            if a > t1:
                break
        else:
            b = t1 + template.delta - k * s
            a = b - H
            if b < t0:
                break
        try:
            lens = band_lens(ctx, a, b, **kw)
        except LensError as exc:
            raise CoveringError(f"lens {k} on [{a:g}, {b:g}]: {exc}") from exc
        W = template.slice_w(lens)
        if W.size == 0:
            raise CoveringError(f"lens {k} on [{a:g}, {b:g}] has an empty W slice")
        lenses.append(lens)
        Ws.append(W)
        covered[W] = True
        k += 1
    gap = need[~covered[need]]
    if gap.size:
        raise CoveringError(f"covering gap: point {int(gap[0])} (time {tau[gap[0]]:g}) lies in no W "
                            f"and not in the margin")
    return certify_covering(ctx, lenses, orientation, margin, Ws, template)


def certify_covering(ctx, lenses, orientation, margin, W=None, template=None) -> Covering:
    """Compute future edges and check the covering and strong causality.

    ``W`` lists the covering sets (subsets of each lens's maximal ``W``);
    by default the maximal sets are used.
    """
    n = len(lenses)
    W = [l.W for l in lenses] if W is None else [np.asarray(w, dtype=int) for w in W]
    for k, (lens, w) in enumerate(zip(lenses, W)):
        if not np.all(np.isin(w, lens.W)):
            raise CoveringError(f"covering set {k} is not inside the admissible W of its lens")
    edges = np.zeros((n, n), dtype=bool)
    for a, la in enumerate(lenses):
        for b in range(n):
            edges[a, b] = np.intersect1d(W[b], la.Z).size > 0
    cov = Covering(ctx, list(lenses), orientation, np.asarray(margin, dtype=int), edges, W, template)
    inst = ctx.inst
    union = np.union1d(cov.w_union, cov.margin)
    if union.size != inst.n:
        gap = np.setdiff1d(np.arange(inst.n), union)
        raise CoveringError(f"covering gap: point {int(gap[0])} lies in no W and not in the margin")
    R = cov.reach
    for a in range(n):
        for b in range(n):
            if R[a, b] and np.intersect1d(W[a], W[b]).size:
                raise CoveringError(f"strong causality fails: lens {b} is future-related to lens {a} "
                                    f"but their W sets overlap")
    return cov


@dataclass
class GlueTrace:
    """Per-round record of the inductive construction."""

    rounds: list = field(default_factory=list)
    pieces: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rounds": self.rounds,
                "pieces": [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in p.items()}
                           for p in self.pieces]}

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)


def _front(cov: Covering, idx) -> float:
    """Earliest (future) or latest (past) time of a support set."""
    t = cov.inst.times[idx]
    if t.size == 0:
        return float("nan")
    return float(t.min()) if cov.orientation == "future" else float(t.max())


def propagate(cov: Covering, R, max_iter: int = 1000, tol: float = 0.0, trace: GlueTrace | None = None):
    """Run the inductive gluing on the columns of ``R`` (vary coefficients).

    Returns ``(V, parked, rounds)``: accumulated solutions, residual parked in
    the margin, and the number of rounds.
    """
    inst = cov.inst
    R = np.array(R, dtype=float)
    single = R.ndim == 1
    if single:
        R = R[:, None]
    N = inst.n
    V = np.zeros_like(R)
    parked = np.zeros_like(R)
    owner = cov.owner
    in_margin = np.zeros(N, dtype=bool)
    in_margin[cov.margin] = True
    ref = max(np.linalg.norm(R), 1e-300)
    E = cov.ctx.E
    prev_front = None
    for it in range(max_iter + 1):
        parked[in_margin] += R[in_margin]
        R[in_margin] = 0.0
        rows = np.flatnonzero(np.any(R != 0, axis=1))
        supp = np.flatnonzero(np.linalg.norm(R, axis=1) > EPS_SUPP * np.abs(R).max(initial=0.0))
        norm = float(np.linalg.norm(R))
        front = _front(cov, supp)
        if trace is not None:
            trace.rounds.append({"round": it, "residual_norm": norm, "front_time": front,
                                 "support": supp.tolist()})
        if rows.size == 0 or norm <= tol * ref:
            return (V[:, 0], parked[:, 0], it) if single else (V, parked, it)
        if it == max_iter:
            break
        if prev_front is not None:
            advanced = front > prev_front if cov.orientation == "future" else front < prev_front
            if not advanced:
                raise GlueError(f"residual front did not advance in round {it} ({prev_front} -> {front})")
        prev_front = front
        bad = rows[owner[rows] < 0]
        if bad.size:
            raise GlueError(f"residual at point {int(bad[0])} is in no W and not in the margin")
        newR = np.zeros_like(R)
        for k in np.unique(owner[rows]):
            lens = cov.lenses[k]
            sel = rows[owner[rows] == k]
            pos = np.searchsorted(lens.W, sel)
            Vout, Wt = lens.glue_maps
            piece = R[sel]
            vo = Vout[:, pos] @ piece
            V += vo
            newR -= E @ (Wt[:, pos] @ piece)
            if trace is not None:
                trace.pieces.append({"round": it, "lens": int(k), "points": sel,
                                     "v_support": supp_eps(np.linalg.norm(vo, axis=1)),
                                     "norm": float(np.linalg.norm(piece))})
        R = newR
    raise GlueError(f"max_iter={max_iter} exceeded; residual front stuck at {prev_front}")


def glue_global(cov: Covering, w, max_iter: int = 1000, tol: float = 0.0, check: bool = True,
                check_tol: float = 1e-6):
    """Global weak solution by inductive gluing.

    ``w`` is a full jet or vary coefficients supported in the union of the
    ``W`` sets.  Returns ``(v_coeffs, trace)``; ``trace.rounds[-1]`` holds the
    parked residual information and ``trace.final_error`` the global weak error.
    """
    ctx = cov.ctx
    c = ctx.to_coeffs(w)
    supp = supp_eps(c)
    outside = np.setdiff1d(supp, cov.w_union)
    if outside.size:
        raise GlueError(f"inhomogeneity is supported outside the W sets at point {int(outside[0])}")
    trace = GlueTrace()
    v, parked, _ = propagate(cov, c, max_iter, tol, trace)
    trace.parked = parked
    trace.final_error = float("nan")
    if check:
        err = global_weak_error(cov, v, c)
        trace.final_error = err
        if err > check_tol:
            raise GlueError(f"global weak residual {err:.3g} exceeds {check_tol:g}")
    return v, trace


def global_weak_error(cov_or_basis, v, w) -> float:
    """``max_u |<Delta u, v>_M - <u, w>_M| / |w|`` over the common test space."""
    if isinstance(cov_or_basis, Covering):
        B = cov_or_basis.test_space()
        ctx = cov_or_basis.ctx
    else:
        B, ctx = cov_or_basis
    if B.shape[0] == 0:
        return 0.0
    rho = ctx.inst.weights
    lhs = (B @ ctx.delta_vary.T) @ (rho * v)
    rhs = B @ (rho * w)
    scale = max(float(np.sqrt(rho @ w ** 2)), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)


def audit_local_finiteness(cov: Covering, trace: GlueTrace, K) -> int:
    """Number of glued pieces whose solution support meets ``K``."""
    K = np.asarray(list(K), dtype=int)
    if K.size == 0:
        return 0
    return int(sum(np.intersect1d(p["v_support"], K).size > 0 for p in trace.pieces))
