from collections import deque

import numpy as np
import pytest

from cvp.gluing import (CoveringError, CoveringTemplate, GlueError, GlueTrace, audit_local_finiteness,
                        build_covering, certify_covering, common_test_space, glue_global,
                        global_weak_error, propagate)
from cvp.instance import KernelSpec, generate_lattice
from cvp.action_el import solve_critical_weights
from cvp.local_solver import Context, band_lens

from conftest import critical_slab


@pytest.fixture(scope="module")
def cov(small_greens):
    return small_greens.covering_future


@pytest.fixture(scope="module")
def cov_past(small_greens):
    return small_greens.covering_past


def bfs_reach(edges):
    n = edges.shape[0]
    out = np.zeros_like(edges, dtype=bool)
    for a in range(n):
        q = deque(np.flatnonzero(edges[a]))
        while q:
            b = q.popleft()
            if not out[a, b]:
                out[a, b] = True
                q.extend(np.flatnonzero(edges[b]))
    return out


@pytest.mark.parametrize("which", ["cov", "cov_past"])
def test_covering_certificate(which, request):
    c = request.getfixturevalue(which)
    inst = c.inst
    assert np.array_equal(np.union1d(c.w_union, c.margin), np.arange(inst.n))
    for a, la in enumerate(c.lenses):
        for b in range(len(c.lenses)):
            assert c.edges[a, b] == bool(np.intersect1d(c.W[b], la.Z).size)
    R = bfs_reach(c.edges)
    assert np.array_equal(R, c.reach)
    assert not np.any(np.diag(R))
    tau = inst.times
    for a, b in zip(*np.nonzero(R)):
        assert not np.intersect1d(c.W[a], c.W[b]).size
        # reachability only moves into strictly later (earlier, for the past problem) bands
        if c.orientation == "future":
            assert tau[c.W[b]].min() > tau[c.W[a]].max()
        else:
            assert tau[c.W[b]].max() < tau[c.W[a]].min()
    cert = c.certificate()
    assert cert["strongly_causal"] and cert["n_lenses"] == len(c.lenses)


def test_single_lens_covering():
    ctx = Context(critical_slab(11, 4))
    lens = band_lens(ctx, 0.0, 10.0, trials=1)
    margin = np.flatnonzero(ctx.inst.times > 10 - 1.5)
    assert np.all(np.isin(lens.Z, margin))
    c = certify_covering(ctx, [lens], "future", margin)
    assert not c.edges.any()
    w = np.zeros(ctx.inst.n)
    w[c.W[0][:3]] = [1.0, -2.0, 0.5]
    v, trace = glue_global(c, w)
    assert trace.n_rounds == 2 and trace.rounds[-1]["residual_norm"] == 0
    assert np.allclose(v, lens.cutoff * lens.eta_I * lens.solve_coeffs(w), atol=1e-14)


def test_covering_errors(cov):
    ctx = cov.ctx
    with pytest.raises(CoveringError, match="gap"):
        build_covering(ctx, CoveringTemplate(height=4, stride=5, check_hyperbolicity=False))
    dropped = [w[1:] if k == 1 else w for k, w in enumerate(cov.W)]
    with pytest.raises(CoveringError, match=f"point {cov.W[1][0]}"):
        certify_covering(ctx, cov.lenses, "future", cov.margin, dropped)
    overlap = [cov.lenses[0].W] + list(cov.W[1:])
    with pytest.raises(CoveringError, match="strong causality"):
        certify_covering(ctx, cov.lenses, "future", cov.margin, overlap)
    torus = solve_critical_weights(
        generate_lattice(2, (8, 4), 1.0, KernelSpec("iso_bump", 1.5), periodic_axes=(0, 1)))
    with pytest.raises(CoveringError, match="periodic"):
        build_covering(Context(torus))


def test_template_round_trip():
    t = CoveringTemplate(height=3, stride=1, trials=2)
    assert CoveringTemplate.from_dict(t.to_dict()) == t
    with pytest.raises(ValueError):
        CoveringTemplate.from_dict({"hieght": 3})


def test_glue_zero(cov):
    v, trace = glue_global(cov, np.zeros(cov.inst.n))
    assert np.all(v == 0) and trace.n_rounds == 1 and not trace.pieces


@pytest.mark.parametrize("which", ["cov", "cov_past"])
def test_glue_point_source(which, request, rng):
    c = request.getfixturevalue(which)
    inst = c.inst
    first = c.W[0]
    w = np.zeros(inst.n)
    w[first[0]] = 1.0
    v, trace = glue_global(c, w)
    n_bands = len(c.lenses)
    nonterminal = [r for r in trace.rounds if r["residual_norm"] > 0]
    assert len(nonterminal) <= n_bands
    fronts = [r["front_time"] for r in nonterminal]
    steps = np.diff(fronts) if c.orientation == "future" else -np.diff(fronts)
    assert np.all(steps > 0)
    assert np.all(np.isin(np.flatnonzero(trace.parked), c.margin))
    # independent recomputation of the final weak residual
    B = c.test_space()
    assert B.shape[0] > 0
    op, E, rho = c.ctx.op, c.ctx.E, inst.weights
    vj, wj = E.T @ v, E.T @ w
    worst = 0.0
    for u in B:
        uj = E.T @ u
        lhs = rho @ op.pointwise(vj, uj)
        rhs = rho @ np.einsum("ik,ik->i", uj.reshape(inst.n, -1), wj.reshape(inst.n, -1))
        worst = max(worst, abs(lhs - rhs))
    assert worst / np.sqrt(rho @ w ** 2) <= 1e-6
    assert trace.final_error == pytest.approx(global_weak_error(c, v, w), abs=1e-15)


def test_glue_deterministic_and_linear(cov, rng):
    w = np.zeros(cov.inst.n)
    w[cov.w_union] = rng.normal(size=cov.w_union.size)
    v1, _ = glue_global(cov, w)
    v2, _ = glue_global(cov, w)
    assert np.array_equal(v1, v2)
    V, parked, rounds = propagate(cov, np.stack([w, 2 * w], axis=1))
    assert np.allclose(V[:, 1], 2 * V[:, 0], atol=1e-13)
    assert np.allclose(V[:, 0], v1, rtol=0, atol=1e-13 * np.abs(v1).max())


def test_glue_order_dependence(cov, rng):
    # reversing the lens order changes the first-index-wins partition but must
    # still give a valid weak solution
    rev = certify_covering(cov.ctx, cov.lenses[::-1], "future", cov.margin, cov.W[::-1], cov.template)
    w = np.zeros(cov.inst.n)
    w[cov.w_union] = rng.normal(size=cov.w_union.size)
    for c in (cov, rev):
        v, trace = glue_global(c, w)
        assert trace.final_error <= 1e-6


def test_glue_rejects_source_outside_w(cov):
    w = np.zeros(cov.inst.n)
    w[np.setdiff1d(cov.margin, cov.w_union)[0]] = 1.0
    with pytest.raises(GlueError, match="outside"):
        glue_global(cov, w)


def test_audit(cov):
    w = np.zeros(cov.inst.n)
    w[cov.W[0][0]] = 1.0
    v, trace = glue_global(cov, w)
    assert audit_local_finiteness(cov, trace, []) == 0
    assert audit_local_finiteness(cov, trace, [cov.W[0][0]]) >= 1
    late = np.flatnonzero(cov.inst.times >= 10)
    n_far = audit_local_finiteness(cov, trace, late)
    thick = sum(np.intersect1d(l.L, late).size > 0 for l in cov.lenses)
    assert n_far <= thick


def test_common_test_space(cov, cov_past):
    both = common_test_space([cov, cov_past])
    f = cov.test_space()
    assert both.shape[0] <= f.shape[0]
    # the intersection lies inside each space
    P = f.T @ f
    assert np.allclose(P @ both.T, both.T, atol=1e-10)
