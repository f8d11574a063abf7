"""Causal Green's operators, the jet spaces of the exact sequence and its verifier.

Everything acts on vary coefficients (one number per point).  The linearized
field equations hold in the weak sense, tested against the common test space
``J'`` of the future and past coverings: for a vary jet ``v`` the weak image
``Delta v`` is the inhomogeneity ``u`` with ``<phi, u>_M = <Delta phi, v>_M`` for
every ``phi`` in ``J'``.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gluing import Covering, GlueError, common_test_space, propagate
from .instance import Instance, compact_range_map, instance_from_dict, instance_to_dict
from .local_solver import EPS_SUPP, Context, supp_eps

SEQ_THRESHOLD = 1e-8


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CVP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(eq=False)
class GreensSystem:
    """Retarded and advanced Green's operators on the admissible sources.

    ``S_ret[:, k]`` and ``S_adv[:, k]`` are minus the glued future and past
    solutions for the unit inhomogeneity at point ``sources[k]``.  Failed
    columns are zero and listed in ``flagged``.
    """

    inst: Instance
    lam: float
    sources: np.ndarray
    S_ret: np.ndarray
    S_adv: np.ndarray
    test_basis: np.ndarray
    rounds_ret: np.ndarray
    rounds_adv: np.ndarray
    flagged: dict = field(default_factory=dict)
    covering_future: Covering | None = None
    covering_past: Covering | None = None
    coverings: dict = field(default_factory=dict)

    @property
    def G(self) -> np.ndarray:
        return self.S_adv - self.S_ret

    @property
    def ctx(self) -> Context:
        if self.covering_future is not None:
            return self.covering_future.ctx
        if not hasattr(self, "_ctx"):
            self._ctx = Context(self.inst, self.lam)
        return self._ctx

    def column(self, point: int) -> int:
        k = np.searchsorted(self.sources, point)
        if k >= self.sources.size or self.sources[k] != point:
            raise KeyError(f"point {point} is not an admissible source")
        return int(k)

    def apply(self, which: str, w) -> np.ndarray:
        """Apply ``S_ret``, ``S_adv`` or ``G`` to coefficients indexed by all points."""
        M = {"ret": self.S_ret, "adv": self.S_adv, "G": self.G}[which]
        w = np.asarray(w, dtype=float)
        bad = np.setdiff1d(supp_eps(w), self.sources)
        if bad.size:
            raise ValueError(f"inhomogeneity is supported at non-admissible point {int(bad[0])}")
        return M @ w[self.sources]

    def weak_errors(self, which: str = "G") -> np.ndarray:
        """Per column ``max_u |<Delta u, col>_M - c <u, e_k>_M|`` over ``J'``.

        ``c`` is ``-1`` for the Green's operators and ``0`` for ``G``.
        """
        M = {"ret": self.S_ret, "adv": self.S_adv, "G": self.G}[which]
        c = 0.0 if which == "G" else -1.0
        F, Phi = weak_functionals(self)
        res = F @ M - c * Phi[:, self.sources]
        if res.size == 0:
            return np.zeros(self.sources.size)
        return np.max(np.abs(res), axis=0) / np.sqrt(self.inst.weights[self.sources])

    # persistence: JSON manifest plus CSV side files for the matrices
    def save(self, path) -> None:
        path = Path(path)
        stem = path.with_suffix("")
        files = {}
        for name, M in (("S_ret", self.S_ret), ("S_adv", self.S_adv), ("test_basis", self.test_basis)):
            f = stem.parent / f"{stem.name}.{name}.csv"
            np.savetxt(f, M.reshape(M.shape[0], -1) if M.size else np.zeros((0, 0)), delimiter=",",
                       fmt="%.17g")
            files[name] = {"file": f.name, "shape": list(M.shape)}
        doc = {
            "instance": instance_to_dict(self.inst),
            "lam": self.lam,
            "sources": self.sources.tolist(),
            "rounds_ret": self.rounds_ret.tolist(),
            "rounds_adv": self.rounds_adv.tolist(),
            "flagged": {str(k): v for k, v in self.flagged.items()},
            "coverings": self.coverings,
            "matrices": files,
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "GreensSystem":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        for key in ("instance", "lam", "sources", "matrices"):
            if key not in doc:
                raise ValueError(f"{path}: missing field '{key}'")
        mats = {}
        for name in ("S_ret", "S_adv", "test_basis"):
            meta = doc["matrices"][name]
            shape = tuple(meta["shape"])
            if 0 in shape:
                mats[name] = np.zeros(shape)
            else:
                mats[name] = np.loadtxt(path.parent / meta["file"], delimiter=",", ndmin=2).reshape(shape)
        return cls(inst=instance_from_dict(doc["instance"]), lam=float(doc["lam"]),
                   sources=np.asarray(doc["sources"], dtype=int),
                   S_ret=mats["S_ret"], S_adv=mats["S_adv"], test_basis=mats["test_basis"],
                   rounds_ret=np.asarray(doc.get("rounds_ret", []), dtype=int),
                   rounds_adv=np.asarray(doc.get("rounds_adv", []), dtype=int),
                   flagged={int(k): v for k, v in doc.get("flagged", {}).items()},
                   coverings=doc.get("coverings", {}))


def admissible_sources(cov_future: Covering, cov_past: Covering) -> np.ndarray:
    """Points in both ``W`` unions and outside ``K`` of both margins."""
    inst = cov_future.inst
    both = np.intersect1d(cov_future.w_union, cov_past.w_union)
    near = compact_range_map(inst, np.union1d(cov_future.margin, cov_past.margin))
    return np.setdiff1d(both, near)


def _columns(cov: Covering, sources: np.ndarray):
    N = cov.inst.n
    V = np.zeros((N, sources.size))
    rounds = np.zeros(sources.size, dtype=int)
    flagged = {}

    def one(k):
        r = np.zeros(N)
        r[sources[k]] = 1.0
        try:
            v, _, it = propagate(cov, r)
            return k, v, it, None
        except GlueError as exc:
            return k, None, 0, str(exc)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        for k, v, it, err in pool.map(one, range(sources.size)):
            if err is None:
                V[:, k] = v
                rounds[k] = it
            else:
                flagged[int(sources[k])] = f"{cov.orientation}: {err}"
    return V, rounds, flagged


def assemble_greens(cov_future: Covering, cov_past: Covering) -> GreensSystem:
    """Assemble ``S_ret``, ``S_adv`` column by column from glued solutions."""
    if cov_future.orientation != "future" or cov_past.orientation != "past":
        raise ValueError("expected a future and a past covering")
    if cov_future.ctx is not cov_past.ctx and cov_future.inst is not cov_past.inst:
        raise ValueError("coverings belong to different instances")
    sources = admissible_sources(cov_future, cov_past)
    V_f, r_f, fl_f = _columns(cov_future, sources)
    V_p, r_p, fl_p = _columns(cov_past, sources)
    flagged = {**fl_f}
    for k, msg in fl_p.items():
        flagged[k] = flagged[k] + "; " + msg if k in flagged else msg
    for k in flagged:
        c = int(np.searchsorted(sources, k))
        V_f[:, c] = 0.0
        V_p[:, c] = 0.0
    B = common_test_space([cov_future, cov_past])
    covs = {"future": cov_future.certificate(), "past": cov_past.certificate()}
    if cov_future.template is not None:
        covs["template"] = cov_future.template.to_dict()
    return GreensSystem(cov_future.inst, cov_future.ctx.lam, sources, -V_f, -V_p, B, r_f, r_p,
                        flagged, cov_future, cov_past, covs)


def weak_functionals(gs: GreensSystem):
    """``F[k] = rho * (Delta phi_k)`` and ``Phi[k] = rho * phi_k`` for the ``J'`` basis.

    ``F @ v`` lists ``<Delta phi_k, v>_M`` and ``Phi @ u`` lists ``<phi_k, u>_M``.
    """
    rho = gs.inst.weights
    B = gs.test_basis
    if B.shape[0] == 0:
        return np.zeros((0, gs.inst.n)), np.zeros((0, gs.inst.n))
    return (B @ gs.ctx.delta_vary.T) * rho[None, :], B * rho[None, :]


@dataclass(eq=False)
class SequenceSpaces:
    """Bases (columns) of the four jet spaces and the weak field operator.

    ``domain`` are the sources on which the pairing with ``J'`` is
    nondegenerate, so that weak equality of inhomogeneities is equality of
    coefficient vectors.  ``T`` maps a vary jet to its weak image ``Delta v``
    on ``domain``; ``consistency(v)`` measures the part of ``<Delta phi, v>``
    that no inhomogeneity on ``domain`` can reproduce.
    """

    domain: np.ndarray
    T: np.ndarray
    Phi: np.ndarray
    F: np.ndarray
    S_ret: np.ndarray
    S_adv: np.ndarray
    J0ss: np.ndarray
    J0s: np.ndarray
    Jsc: np.ndarray
    Jsc_s: np.ndarray
    residuals: dict = field(default_factory=dict)

    @property
    def G(self) -> np.ndarray:
        return self.S_adv - self.S_ret

    @property
    def dims(self) -> dict:
        return {"J0**": self.J0ss.shape[1], "J0*": self.J0s.shape[1],
                "Jsc": self.Jsc.shape[1], "Jsc*": self.Jsc_s.shape[1]}

    def consistency(self, v) -> np.ndarray:
        r = self.F @ v - self.Phi @ (self.T @ v)
        return np.max(np.abs(r), axis=0) if r.size else np.zeros(np.atleast_2d(v).shape[-1])

    def identity_residuals(self, name: str, X: np.ndarray) -> np.ndarray:
        """Column-wise residual of the defining identities of space ``name``."""
        X = np.atleast_2d(X.T).T
        if name == "J0**":
            TX = self.T @ X
            r = np.vstack([self.S_adv @ TX + X, self.S_ret @ TX + X,
                           self.consistency(X)[None, :]])
        elif name == "J0*":
            r = np.vstack([self.T @ self.S_adv @ X + X, self.T @ self.S_ret @ X + X,
                           self.consistency(self.S_adv @ X)[None, :],
                           self.consistency(self.S_ret @ X)[None, :]])
        elif name in ("Jsc", "Jsc*"):
            # representability in the defining range
            R = np.hstack([self.S_ret, self.S_adv]) if name == "Jsc" else np.eye(self.domain.size)
            r = _range_residual(R, X)[None, :]
        else:
            raise KeyError(name)
        if r.size == 0:
            return np.zeros(X.shape[1])
        return np.max(np.abs(r), axis=0)


def _orth(M: np.ndarray, tol: float) -> np.ndarray:
    if M.size == 0 or M.shape[1] == 0:
        return np.zeros((M.shape[0], 0))
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((M.shape[0], 0))
    return U[:, s > tol * s[0]]


def _null(M: np.ndarray, tol: float, scale: float | None = None) -> np.ndarray:
    """Right singular vectors with ``sigma <= tol * scale`` (default: ``tol``)."""
    n = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    s_full = np.zeros(n)
    s_full[:s.size] = s
    thr = tol * (1.0 if scale is None else scale)
    return Vt[s_full <= thr].T


def _range_residual(R: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``min_c |R c - x|`` for each column ``x``, relative to ``1 + |x|``."""
    if X.shape[1] == 0:
        return np.zeros(0)
    if R.shape[1] == 0:
        return np.linalg.norm(X, axis=0) / (1 + np.linalg.norm(X, axis=0))
    c = np.linalg.lstsq(R, X, rcond=None)[0]
    return np.linalg.norm(R @ c - X, axis=0) / (1 + np.linalg.norm(X, axis=0))


def extract_sequence_spaces(gs: GreensSystem, threshold: float = SEQ_THRESHOLD) -> SequenceSpaces:
    """Extract the four spaces as near-null spaces of their identity maps."""
    N = gs.inst.n
    F, Phi = weak_functionals(gs)
    # sources on which the pairing with J' is nondegenerate, excluding flagged columns
    ok = np.array([s not in gs.flagged for s in gs.sources], dtype=bool)
    cand = gs.sources[ok]
    cols = np.flatnonzero(ok)
    if Phi.shape[0]:
        seen = np.linalg.norm(Phi[:, cand], axis=0) > threshold * max(np.abs(Phi).max(), 1e-300)
    else:
        # an empty test space sees no source at all
        seen = np.zeros(cand.size, dtype=bool)
    cand, cols = cand[seen], cols[seen]
    Phi_A = Phi[:, cand]
    if cand.size and np.linalg.matrix_rank(Phi_A, tol=threshold * np.linalg.norm(Phi_A, 2)) < cand.size:
        raise ValueError("the test space does not separate the admissible sources")
    T = np.linalg.pinv(Phi_A) @ F if cand.size else np.zeros((0, N))
    S_ret = gs.S_ret[:, cols]
    S_adv = gs.S_adv[:, cols]
    A = cand.size
    spaces = SequenceSpaces(cand, T, Phi_A, F, S_ret, S_adv,
                            np.zeros((N, 0)), np.zeros((A, 0)), np.zeros((N, 0)), np.zeros((A, 0)))
    # J0*: sources whose Green's images solve Delta S u = -u weakly
    I = np.eye(A)
    M0s = np.vstack([T @ S_adv + I, T @ S_ret + I,
                     F @ S_adv - Phi_A @ (T @ S_adv), F @ S_ret - Phi_A @ (T @ S_ret)])
    spaces.J0s = _null(M0s, threshold)
    # J0**: compactly supported vary jets reproduced by both Green's operators
    In = np.eye(N)
    M0ss = np.vstack([S_adv @ T + In, S_ret @ T + In, F - Phi_A @ T])
    spaces.J0ss = _null(M0ss, threshold)
    # J_sc and J*_sc are ranges over pairs (u1, u2) in J0*-type domains
    U = spaces.J0s
    spaces.Jsc = _orth(np.hstack([S_ret @ U, S_adv @ U]), threshold)
    spaces.Jsc_s = _orth(U, threshold)
    spaces.residuals = {name: float(np.max(spaces.identity_residuals(name, X), initial=0.0))
                        for name, X in (("J0**", spaces.J0ss), ("J0*", spaces.J0s),
                                        ("Jsc", spaces.Jsc), ("Jsc*", spaces.Jsc_s))}
    return spaces


def _check(name, statement, value, tol, vacuous=False, witness=None, extra=None):
    out = {"check": name, "statement": statement, "value": float(value), "tol": tol,
           "passed": bool(vacuous or value <= tol), "vacuous": bool(vacuous), "witness": None}
    if not out["passed"] and witness is not None:
        out["witness"] = np.asarray(witness, dtype=float).tolist()
    if extra:
        out.update(extra)
    return out


def _worst(res: np.ndarray, X: np.ndarray):
    if res.size == 0:
        return 0.0, None
    k = int(np.argmax(res))
    return float(res[k]), X[:, k]


def verify_exact_sequence(gs: GreensSystem, spaces: SequenceSpaces, tol: float = 1e-8) -> dict:
    """Numerical verdicts for the nine steps of the exactness proof."""
    sp = spaces
    T, G = sp.T, sp.G
    Jss, Js, Jsc, Jscs = sp.J0ss, sp.J0s, sp.Jsc, sp.Jsc_s
    checks = []

    # (i) Delta(J0**) in J0*
    TX = T @ Jss
    res = sp.identity_residuals("J0*", TX) if TX.shape[1] else np.zeros(0)
    v, w = _worst(res, Jss)
    checks.append(_check("i", "Delta(J0**) is contained in J0*", v, tol, Jss.shape[1] == 0, w))

    # (ii) Delta injective on J0**
    if Jss.shape[1]:
        _, s, Vt = np.linalg.svd(TX)
        ratio = s[-1] / max(s[0], 1e-300) if s.size == Jss.shape[1] else 0.0
        c = _check("ii", "Delta is injective on J0**", ratio, tol, False, None,
                   {"sigma_ratio": float(ratio)})
        c["passed"] = bool(ratio > tol)
        if not c["passed"]:
            c["witness"] = (Jss @ Vt[-1]).tolist()
        checks.append(c)
    else:
        checks.append(_check("ii", "Delta is injective on J0**", 0.0, tol, True))

    # (iii) ker G on J0* lies in Delta(J0**)
    GJ = G @ Js
    scale = max(np.linalg.norm(GJ, 2), 1e-300) if GJ.size else 1.0
    K = Js @ _null(GJ, tol, scale) if Js.shape[1] else np.zeros((Js.shape[0], 0))
    res = _range_residual(TX, K)
    v, w = _worst(res, K)
    checks.append(_check("iii", "ker G on J0* is contained in Delta(J0**)", v, tol, K.shape[1] == 0, w,
                         {"kernel_dim": int(K.shape[1])}))

    # (iv) G(J0*) in J_sc
    res = _range_residual(Jsc, G @ Js)
    v, w = _worst(res, Js)
    checks.append(_check("iv", "G(J0*) is contained in J_sc", v, tol, Js.shape[1] == 0, w))

    # (v) G Delta = 0 on J0**
    res = np.linalg.norm(G @ TX, axis=0) / (1 + np.linalg.norm(Jss, axis=0)) if Jss.shape[1] else np.zeros(0)
    v, w = _worst(res, Jss)
    checks.append(_check("v", "G Delta vanishes on J0**", v, tol, Jss.shape[1] == 0, w))

    # (vi) ker Delta on J_sc lies in G(J0*)
    TJ = T @ Jsc
    scale = max(np.linalg.norm(TJ, 2), 1e-300) if TJ.size else 1.0
    K = Jsc @ _null(TJ, tol, scale) if Jsc.shape[1] else np.zeros((Jsc.shape[0], 0))
    res = _range_residual(G @ Js, K)
    v, w = _worst(res, K)
    checks.append(_check("vi", "ker Delta on J_sc is contained in G(J0*)", v, tol, K.shape[1] == 0, w,
                         {"kernel_dim": int(K.shape[1])}))

    # (vii) Delta(J_sc) in J*_sc, including weak consistency of Delta on J_sc
    res = np.maximum(_range_residual(Jscs, TJ), sp.consistency(Jsc)) if Jsc.shape[1] else np.zeros(0)
    v, w = _worst(res, Jsc)
    checks.append(_check("vii", "Delta(J_sc) is contained in J*_sc", v, tol, Jsc.shape[1] == 0, w))

    # (viii) Delta G = 0 on J0*
    GJ = G @ Js
    res = (np.maximum(np.linalg.norm(T @ GJ, axis=0), sp.consistency(GJ)) / (1 + np.linalg.norm(Js, axis=0))
           if Js.shape[1] else np.zeros(0))
    v, w = _worst(res, Js)
    checks.append(_check("viii", "Delta G vanishes on J0*", v, tol, Js.shape[1] == 0, w))

    # (ix) Delta maps J_sc onto J*_sc
    res = _range_residual(TJ, Jscs)
    v, w = _worst(res, Jscs)
    checks.append(_check("ix", "Delta maps J_sc onto J*_sc", v, tol, Jscs.shape[1] == 0, w))

    return {
        "tol": tol,
        "dims": spaces.dims,
        "domain_size": int(spaces.domain.size),
        "identity_residuals": spaces.residuals,
        "flagged_columns": {str(k): m for k, m in gs.flagged.items()},
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
        "vacuous": [c["check"] for c in checks if c["vacuous"]],
    }


def support_causality(gs: GreensSystem, slack: float | None = None) -> dict:
    """Count columns whose support reaches beyond one kernel range into the wrong direction."""
    tau = gs.inst.times
    slack = gs.inst.kernel.range if slack is None else slack
    bad_ret, bad_adv = [], []
    for k, s in enumerate(gs.sources):
        for M, bad, sign in ((gs.S_ret, bad_ret, 1), (gs.S_adv, bad_adv, -1)):
            sup = supp_eps(M[:, k], EPS_SUPP)
            if sup.size and (sign * (tau[sup] - tau[s])).min() < -slack - 1e-9:
                bad.append(int(s))
    return {"slack": slack, "ret_violations": bad_ret, "adv_violations": bad_adv}
