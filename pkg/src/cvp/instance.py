"""Finite causal variational problems: point clouds, weights and kernels.

An :class:`Instance` is a finite weighted point cloud in ``R^m`` together with a
compactly supported symmetric kernel ``L(x, y)``.  Integrals against the measure
become weighted sums over the points.  Coordinate 0 is interpreted as time.

Kernel derivative conventions: ``grad1`` is the gradient with respect to the
first argument, ``hess11`` the Hessian in the first argument.  Both kernels
shipped here depend on ``x - y`` only, so ``grad2 = -grad1``,
``hess12 = -hess11`` and ``hess22 = hess11``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

KERNEL_NAMES = ("iso_bump", "lightcone_bump")


class InstanceError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of a compactly supported bump kernel.

    ``iso_bump``:       ``c * max(0, 1 - d^2/r^2)^2``
    ``lightcone_bump``: ``c * max(0, 1 + (dt^2 - k^2 |dx|^2)/r^2)^2 * max(0, 1 - d^2/r^2)^2``

    The unit offset in the cone factor keeps the kernel strictly positive on
    the diagonal; it vanishes for separations with ``k^2|dx|^2 - dt^2 >= r^2``.
    """

    name: str = "iso_bump"
    range: float = 1.5
    amplitude: float = 1.0
    cone_slope: float = 1.0

    def __post_init__(self):
        if self.name not in KERNEL_NAMES:
            raise InstanceError(f"unknown kernel {self.name!r}; expected one of {KERNEL_NAMES}")
        for attr in ("range", "amplitude", "cone_slope"):
            val = getattr(self, attr)
            if not (np.isfinite(val) and val > 0):
                raise InstanceError(f"kernel {attr} must be positive, got {val}")

    def blocks(self, delta):
        """Value, gradient and Hessian with respect to the first argument.

        ``delta`` has shape ``(P, m)`` and holds ``x - y`` (already wrapped).
        Returns ``L (P,)``, ``g (P, m)``, ``H (P, m, m)``.  Everything is zero
        for ``|delta| >= range``.
        """
        delta = np.atleast_2d(np.asarray(delta, dtype=float))
        P, m = delta.shape
        r2 = self.range ** 2
        s = np.einsum("pi,pi->p", delta, delta) / r2
        w = 1.0 - s
        inside = w > 0
        eye = np.eye(m)
        # radial factor g_r = w^2 and its derivatives
        gr = w * w
        dgr = -4.0 * w[:, None] * delta / r2
        ddgr = 8.0 * np.einsum("pi,pj->pij", delta, delta) / r2 ** 2 - 4.0 * w[:, None, None] * eye / r2
        c = self.amplitude
        if self.name == "iso_bump":
            L = c * gr
            g = c * dgr
            H = c * ddgr
        else:
            k2 = self.cone_slope ** 2
            sig = np.full(m, -k2)
            sig[0] = 1.0
            p = 1.0 + np.einsum("pi,i,pi->p", delta, sig, delta) / r2
            cone = p > 0
            dp = 2.0 * delta * sig / r2
            f = p * p
            df = 2.0 * p[:, None] * dp
            ddf = 2.0 * np.einsum("pi,pj->pij", dp, dp) + 2.0 * p[:, None, None] * np.diag(2.0 * sig / r2)
            f = np.where(cone, f, 0.0)
            df = np.where(cone[:, None], df, 0.0)
            ddf = np.where(cone[:, None, None], ddf, 0.0)
            L = c * f * gr
            g = c * (df * gr[:, None] + f[:, None] * dgr)
            H = c * (ddf * gr[:, None, None] + np.einsum("pi,pj->pij", df, dgr)
                     + np.einsum("pi,pj->pij", dgr, df) + f[:, None, None] * ddgr)
        L = np.where(inside, L, 0.0)
        g = np.where(inside[:, None], g, 0.0)
        H = np.where(inside[:, None, None], H, 0.0)
        return L, g, H


@dataclass(frozen=True)
class PairData:
    """All ordered pairs ``(i, j)`` with nonzero kernel support, ``i == j`` included."""

    i: np.ndarray
    j: np.ndarray
    delta: np.ndarray  # x_i - x_j, wrapped
    L: np.ndarray
    g1: np.ndarray
    h11: np.ndarray


@dataclass(frozen=True, eq=False)
class Instance:
    """Weighted point cloud plus kernel.

    ``periodic`` holds one entry per axis: the period length or ``None``.
    """

    points: np.ndarray
    weights: np.ndarray
    kernel: KernelSpec
    s_param: float = 1.0
    periodic: tuple = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        wts = np.array(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        N, m = pts.shape
        if N < 1:
            raise InstanceError("instance needs at least one point")
        if wts.shape != (N,):
            raise InstanceError(f"expected {N} weights, got {wts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise InstanceError("non-finite coordinates")
        if not np.all(np.isfinite(wts)) or np.any(wts <= 0):
            raise InstanceError("weights must be finite and strictly positive")
        if not (np.isfinite(self.s_param) and self.s_param >= 0):
            raise InstanceError("s_param must be finite and non-negative")
        per = self.periodic
        if per is None:
            per = (None,) * m
        per = tuple(None if p is None else float(p) for p in per)
        if len(per) != m:
            raise InstanceError(f"periodic must have {m} entries")
        object.__setattr__(self, "periodic", per)
        pts.setflags(write=False)
        wts.setflags(write=False)
        if N > 1:
            d = self.wrapped_delta(np.repeat(np.arange(N), N), np.tile(np.arange(N), N))
            dist = np.sqrt(np.einsum("pi,pi->p", d, d)).reshape(N, N)
            np.fill_diagonal(dist, np.inf)
            if np.min(dist) < 1e-12:
                raise InstanceError("points must be distinct")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.points[:, 0]

    def with_weights(self, weights) -> "Instance":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def with_points(self, points) -> "Instance":
        return replace(self, points=np.asarray(points, dtype=float))

    def wrap(self, delta: np.ndarray) -> np.ndarray:
        """Minimal-image convention on periodic axes."""
        delta = np.array(delta, dtype=float)
        for ax, p in enumerate(self.periodic):
            if p is not None:
                delta[..., ax] -= p * np.round(delta[..., ax] / p)
        return delta

    def wrapped_delta(self, i, j) -> np.ndarray:
        return self.wrap(self.points[i] - self.points[j])

    def distance_matrix(self) -> np.ndarray:
        N = self.n
        ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        d = self.wrapped_delta(ii.ravel(), jj.ravel())
        return np.sqrt(np.einsum("pi,pi->p", d, d)).reshape(N, N)

    @cached_property
    def pairs(self) -> PairData:
        dist = self.distance_matrix()
        i, j = np.nonzero(dist < self.kernel.range)
        delta = self.wrapped_delta(i, j)
        L, g, H = self.kernel.blocks(delta)
        keep = (L != 0) | np.any(g != 0, axis=1) | np.any(H != 0, axis=(1, 2)) | (i == j)
        i, j, delta, L, g, H = i[keep], j[keep], delta[keep], L[keep], g[keep], H[keep]
        for arr in (i, j, delta, L, g, H):
            arr.setflags(write=False)
        return PairData(i, j, delta, L, g, H)

    @cached_property
    def kernel_matrix(self) -> np.ndarray:
        K = np.zeros((self.n, self.n))
        p = self.pairs
        K[p.i, p.j] = p.L
        return K


def eval_kernel(inst: Instance, i: int, j: int, order: int = 0):
    """Kernel value (order 0), gradients (order 1) or second-derivative blocks (order 2).

    Order 1 returns ``(d1L, d2L)``; order 2 returns ``(d11L, d12L, d22L)``.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order!r}")
    delta = inst.wrapped_delta(np.array([i]), np.array([j]))
    L, g, H = inst.kernel.blocks(delta)
    if order == 0:
        return float(L[0])
    if order == 1:
        return g[0], -g[0]
    return H[0], -H[0], H[0]


def compact_range_map(inst: Instance, K) -> np.ndarray:
    """Indices of the points that can interact with the index set ``K``.

    The open neighbourhood of ``K`` is a ball of radius ``range/10`` around it,
    so the result is every point within ``1.1 * range`` of ``K``.
    """
    K = np.asarray(sorted(set(int(k) for k in K)), dtype=int)
    if K.size == 0:
        return K
    radius = 1.1 * inst.kernel.range
    ii, jj = np.meshgrid(K, np.arange(inst.n), indexing="ij")
    d = inst.wrapped_delta(ii.ravel(), jj.ravel())
    dist = np.sqrt(np.einsum("pi,pi->p", d, d)).reshape(K.size, inst.n)
    return np.nonzero(np.any(dist < radius, axis=0))[0]


def generate_lattice(m: int, extent, spacing: float, kernel: KernelSpec,
                     periodic_axes=(), s_param: float = 1.0) -> Instance:
    """Regular lattice with unit weights, axis 0 first in the point ordering."""
    extent = (int(extent),) * m if np.isscalar(extent) else tuple(int(e) for e in extent)
    if len(extent) != m:
        raise InstanceError(f"extent needs {m} entries")
    if spacing <= 0:
        raise InstanceError("spacing must be positive")
    periodic = []
    for ax in range(m):
        if ax in periodic_axes:
            if extent[ax] < 3:
                raise InstanceError(f"periodic axis {ax} needs extent >= 3")
            period = extent[ax] * spacing
            if period <= 2 * kernel.range:
                raise InstanceError(
                    f"period {period} on axis {ax} is not larger than 2*range = {2 * kernel.range}")
            periodic.append(period)
        else:
            periodic.append(None)
    grids = np.meshgrid(*[np.arange(e) * spacing for e in extent], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    return Instance(pts, np.ones(len(pts)), kernel, s_param, tuple(periodic))


def instance_to_dict(inst: Instance) -> dict:
    k = inst.kernel
    return {
        "dim": inst.dim,
        "points": [[float(c) for c in p] for p in inst.points],
        "weights": [float(w) for w in inst.weights],
        "kernel": {"name": k.name, "range": k.range, "amplitude": k.amplitude,
                   "cone_slope": k.cone_slope},
        "s_param": float(inst.s_param),
        "periodic": list(inst.periodic),
    }


def instance_from_dict(doc: dict) -> Instance:
    try:
        kernel = KernelSpec(**doc["kernel"])
        inst = Instance(np.array(doc["points"], dtype=float), np.array(doc["weights"], dtype=float),
                        kernel, float(doc["s_param"]),
                        tuple(doc.get("periodic") or [None] * int(doc["dim"])))
    except KeyError as exc:
        raise InstanceError(f"instance document is missing field {exc.args[0]!r}") from None
    except TypeError as exc:
        raise InstanceError(f"malformed instance document: {exc}") from None
    if inst.dim != int(doc["dim"]):
        raise InstanceError(f"field 'dim' = {doc['dim']} but points have {inst.dim} coordinates")
    return inst


class _FullPrecisionEncoder(json.JSONEncoder):
    def iterencode(self, o, _one_shot=False):
        return super().iterencode(_round_trip(o), _one_shot)


def _round_trip(o):
    # repr of a Python float is the shortest string that round-trips (<= 17 digits)
    if isinstance(o, dict):
        return {k: _round_trip(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_round_trip(v) for v in o]
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return _round_trip(o.tolist())
    return o


def dumps(doc) -> str:
    return json.dumps(_round_trip(doc), indent=1)


def save_instance(inst: Instance, path) -> None:
    Path(path).write_text(dumps(instance_to_dict(inst)))


def load_instance(path) -> Instance:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return instance_from_dict(doc)
