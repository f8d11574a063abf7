"""Causal structure read off from the supports of retarded solutions.

On a finite point set every neighbourhood below the point separation is the
point itself, so the future relation uses one canonical neighbourhood per
point and the topological closure of the transitive relation is automatic.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .green import GreensSystem
from .local_solver import EPS_SUPP, supp_eps


@dataclass(frozen=True, eq=False)
class CausalRelation:
    """Boolean relation on point indices; ``pairs[x, y]`` means ``y`` is in the future of ``x``."""

    n: int
    pairs: np.ndarray
    kind: str = "hatR"
    sources: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("hatR", "R"):
            raise ValueError("kind must be 'hatR' or 'R'")
        if self.pairs.shape != (self.n, self.n):
            raise ValueError("pairs must be an n x n boolean matrix")

    def edges(self) -> np.ndarray:
        return np.argwhere(self.pairs)

    def is_transitive(self) -> bool:
        return not np.any(_compose(self.pairs, self.pairs) & ~self.pairs)


def _compose(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return (A.astype(np.int64) @ B.astype(np.int64)) > 0


def causal_future(gs: GreensSystem, V, eps: float = EPS_SUPP) -> np.ndarray:
    """Union of the numerical supports of the retarded solutions for sources in ``V``."""
    V = np.unique(np.asarray(list(V), dtype=int))
    out = np.zeros(gs.inst.n, dtype=bool)
    for x in V:
        k = gs.column(int(x))
        out[supp_eps(gs.S_ret[:, k], eps)] = True
    return np.flatnonzero(out)


def build_hatR(gs: GreensSystem, r_nb: float | None = None, eps: float = EPS_SUPP) -> CausalRelation:
    """``(x, y)`` with ``y`` in the causal future of the ball of radius ``r_nb`` around ``x``.

    The ball is clipped to the admissible sources; points whose ball contains
    no admissible source get no row and are left out of ``sources``.
    """
    inst = gs.inst
    if r_nb is None:
        r_nb = _spacing(inst)
    N = inst.n
    supp = np.zeros((gs.sources.size, N), dtype=bool)
    for k in range(gs.sources.size):
        supp[k, supp_eps(gs.S_ret[:, k], eps)] = True
    dist = inst.distance_matrix()
    is_src = np.zeros(N, dtype=bool)
    is_src[gs.sources] = True
    pairs = np.zeros((N, N), dtype=bool)
    rows = []
    for x in range(N):
        ball = np.flatnonzero((dist[x] <= r_nb + 1e-12) & is_src)
        if ball.size == 0:
            continue
        rows.append(x)
        pairs[x] = supp[np.searchsorted(gs.sources, ball)].any(axis=0)
    return CausalRelation(N, pairs, "hatR", np.asarray(rows, dtype=int))


def _spacing(inst) -> float:
    d = inst.distance_matrix()
    d[d == 0] = np.inf
    return float(d.min()) if np.isfinite(d).any() else 1.0


def transitive_closure(rel: CausalRelation) -> CausalRelation:
    """Smallest transitive superset, by boolean squaring up to a fixed point."""
    R = rel.pairs.astype(bool).copy()
    while True:
        R2 = R | _compose(R, R)
        if np.array_equal(R2, R):
            return CausalRelation(rel.n, R, "R", rel.sources)
        R = R2


def future_set(rel: CausalRelation, x: int) -> np.ndarray:
    if rel.kind != "R":
        raise ValueError("future_set expects a transitively closed relation")
    return np.flatnonzero(rel.pairs[x])


def cone_excess(inst, x: int, ys, slope: float) -> np.ndarray:
    """Euclidean distance from each ``y`` to the closed future cone ``dt >= slope |dx|`` of ``x``."""
    ys = np.asarray(ys, dtype=int)
    d = inst.wrapped_delta(ys, np.full(ys.size, x))
    dt = d[:, 0]
    dx = np.linalg.norm(d[:, 1:], axis=1)
    nrm = np.sqrt(1.0 + slope ** 2)
    out = np.maximum(0.0, slope * dx - dt) / nrm
    # points whose projection on the boundary ray falls behind the apex
    behind = (slope * dt + dx) < 0
    out[behind] = np.hypot(dt[behind], dx[behind])
    return out


def lightcone_report(gs: GreensSystem, slope: float | None = None, eps: float = EPS_SUPP) -> dict:
    """Compare each retarded support with the slope cone dilated by ``rounds * range``."""
    inst = gs.inst
    slope = inst.kernel.cone_slope if slope is None else slope
    r = inst.kernel.range
    viol, worst = [], 0.0
    for k, x in enumerate(gs.sources):
        ys = supp_eps(gs.S_ret[:, k], eps)
        if ys.size == 0:
            continue
        ex = cone_excess(inst, int(x), ys, slope)
        allowed = max(int(gs.rounds_ret[k]), 1) * r if gs.rounds_ret.size else r
        worst = max(worst, float(ex.max() / allowed))
        for y in ys[ex > allowed + 1e-12]:
            viol.append([int(x), int(y)])
    return {"slope": slope, "range": r, "violations": viol, "n_violations": len(viol),
            "max_excess_over_allowed": worst, "sources": int(gs.sources.size)}


def write_pairs_csv(rel: CausalRelation, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j"])
        for i, j in rel.edges():
            w.writerow([int(i), int(j)])


def write_dot(rel: CausalRelation, path, inst=None) -> None:
    lines = [f"digraph {rel.kind} {{"]
    for x in range(rel.n):
        if inst is not None:
            pos = ",".join(f"{c:g}" for c in inst.points[x][::-1][:2])
            lines.append(f'  {x} [pos="{pos}!"];')
        else:
            lines.append(f"  {x};")
    for i, j in rel.edges():
        if i != j:
            lines.append(f"  {int(i)} -> {int(j)};")
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_slices_csv(rel: CausalRelation, inst, path) -> None:
    """One row per (source, future point), with the time slice and coordinates for plotting."""
    m = inst.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "time", "point"] + [f"x{a}" for a in range(1, m)])
        for x, y in rel.edges():
            w.writerow([int(x), f"{inst.times[y]:.12g}", int(y)]
                       + [f"{c:.12g}" for c in inst.points[y, 1:]])
