import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvp.instance import Instance, KernelSpec, generate_lattice
from cvp.jets import (build_space, direction_space, jet_length, l2_product, load_jet, make_jet,
                      pointwise_product, save_jet, vary_directions)

LAT = generate_lattice(2, (4, 2), 1.0, KernelSpec("iso_bump", 1.5))
LAT = LAT.with_weights(np.linspace(0.5, 1.2, LAT.n))
n_jet = jet_length(LAT)
finite = st.floats(-5, 5, allow_nan=False)


def test_pointwise_examples():
    inst = Instance([[0.0, 0.0], [0.0, 3.0]], [1, 1], KernelSpec())
    z = np.zeros(jet_length(inst))
    assert pointwise_product(inst, z, z, 0) == 0
    e = make_jet(inst, a=[1, 1])
    assert pointwise_product(inst, e, e, 1) == 1
    v = make_jet(inst, a=[2, 0], u=[[1, 0], [0, 0]])
    w = make_jet(inst, a=[1, 0], u=[[3, 4], [0, 0]])
    assert pointwise_product(inst, v, w, 0) == 5


def test_l2_examples(rng):
    v, w = rng.normal(size=(2, n_jet))
    assert l2_product(LAT, v, w, np.zeros(LAT.n)) == 0
    one = make_jet(LAT, a=np.ones(LAT.n))
    assert l2_product(LAT, one, one) == pytest.approx(LAT.weights.sum(), rel=1e-14)
    wt = rng.uniform(size=LAT.n)
    brute = 0.0
    for i in range(LAT.n):
        for c in range(3):
            brute += wt[i] * LAT.weights[i] * v[3 * i + c] * w[3 * i + c]
    assert l2_product(LAT, v, w, wt) == pytest.approx(brute, rel=1e-13)


@given(arrays(float, n_jet, elements=finite), arrays(float, n_jet, elements=finite),
       arrays(float, n_jet, elements=finite), finite)
def test_l2_bilinear_symmetric(u, v, w, c):
    lhs = l2_product(LAT, c * u + v, w)
    rhs = c * l2_product(LAT, u, w) + l2_product(LAT, v, w)
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))
    assert l2_product(LAT, u, w) == pytest.approx(l2_product(LAT, w, u), abs=1e-12)
    assert l2_product(LAT, u, u) >= 0
    if np.abs(u).max() > 1e-100:
        assert l2_product(LAT, u, u) > 0


def test_build_space_dimensions():
    assert build_space(LAT, range(LAT.n)).dim == n_jet
    assert build_space(LAT, range(LAT.n), vector_mask=[]).dim == LAT.n
    inst = generate_lattice(1, 4, 1.0, KernelSpec())
    C = make_jet(inst, a=np.ones(4))[None, :]
    sp = build_space(inst, range(4), vector_mask=[], constraints=C)
    assert sp.dim == 3
    with pytest.raises(ValueError):
        build_space(LAT, [])


@given(st.sets(st.integers(0, LAT.n - 1), min_size=1),
       st.lists(st.integers(0, 1), max_size=2, unique=True),
       arrays(float, (2, n_jet), elements=finite))
def test_space_invariants(carrier, axes, C):
    sp = build_space(LAT, carrier, axes, C)
    B = sp.basis
    assert np.allclose(B @ B.T, np.eye(sp.dim), atol=1e-12)
    assert np.all(B[:, ~sp.mask.ravel()] == 0)
    assert np.abs(C @ B.T).max(initial=0) <= 1e-10 * max(1.0, np.abs(C).max())
    again = build_space(LAT, carrier, axes, np.vstack([C, np.eye(n_jet) - sp.projector()]))
    assert np.linalg.norm(again.projector() - sp.projector()) <= 1e-10
    # every carrier point carries a scalar direction when no constraint touches it
    free = build_space(LAT, carrier, axes)
    for i in carrier:
        assert np.any(free.basis[:, 3 * i] != 0)


def test_direction_space_and_vary():
    d = vary_directions(LAT, 0.4)
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
    assert np.allclose(d[:, 1] / d[:, 0], 0.4) and np.all(d[:, 2] == 0)
    sp = direction_space(LAT, d, carrier=[1, 3])
    assert sp.dim == 2
    assert np.allclose(sp.basis[0, 3:6], d[1])


def test_jet_file_round_trip(tmp_path, rng):
    v = rng.normal(size=n_jet)
    save_jet(v, tmp_path / "v.json")
    assert np.array_equal(load_jet(LAT, tmp_path / "v.json"), v)
    (tmp_path / "bad.json").write_text("[1, 2,")
    with pytest.raises(ValueError, match="line 1"):
        load_jet(LAT, tmp_path / "bad.json")
    (tmp_path / "short.json").write_text("[1, 2]")
    with pytest.raises(ValueError, match="length"):
        load_jet(LAT, tmp_path / "short.json")
