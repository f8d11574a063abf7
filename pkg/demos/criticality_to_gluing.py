"""From a lattice to a global weak solution.

Generates an iso_bump slab, makes it critical, checks the Euler-Lagrange
equations in the interior, certifies hyperbolicity on one surface layer and
then glues lens solutions into a global solution of Delta v = w.
"""
import numpy as np

from cvp.action_el import check_restricted_el, eval_ell, solve_critical_weights, translation_test_space
from cvp.gluing import CoveringTemplate, build_covering, glue_global
from cvp.instance import KernelSpec, generate_lattice
from cvp.local_solver import Context

# nearest-neighbour range: boundary effects decay quickly into the bulk
inst = solve_critical_weights(generate_lattice(2, (16, 16), 1.0, KernelSpec("iso_bump", 1.05),
                                               periodic_axes=(1,)))
print(f"N = {inst.n}, max |ell| = {np.abs(eval_ell(inst).ell).max():.2e}")

t = inst.points[:, 0]
interior = np.flatnonzero((t > t.min() + 4.5) & (t < t.max() - 4.5))
ok, worst = check_restricted_el(inst, translation_test_space(inst, interior))
print(f"restricted EL on {interior.size} interior points: worst {worst:.1e} ({'ok' if ok else 'fails'})")

# a wider range for the dynamics
ctx = Context(solve_critical_weights(generate_lattice(2, (32, 8), 1.0, KernelSpec("iso_bump", 1.5),
                                                      periodic_axes=(1,))))
cov = build_covering(ctx, CoveringTemplate(), "future")
print(f"covering: {len(cov.lenses)} lenses, common test space dim {cov.test_space().shape[0]}")

w = np.zeros(ctx.inst.n)
w[cov.w_union[:3]] = [1.0, -0.5, 0.25]
v, trace = glue_global(cov, w)
print(f"glued in {len(trace.rounds)} rounds, global weak error {trace.final_error:.1e}")
