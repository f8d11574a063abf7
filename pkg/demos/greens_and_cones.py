"""Green's operators, the exact sequence and causal cones on 11 x 4 slabs."""
import numpy as np

from cvp.action_el import solve_critical_weights
from cvp.cones import build_hatR, lightcone_report, transitive_closure
from cvp.gluing import CoveringTemplate, build_covering
from cvp.green import assemble_greens, extract_sequence_spaces, verify_exact_sequence
from cvp.instance import KernelSpec, generate_lattice
from cvp.local_solver import Context


def greens(kernel, template):
    inst = solve_critical_weights(generate_lattice(2, (11, 4), 1.0, KernelSpec(kernel, 1.5),
                                                   periodic_axes=(1,)))
    ctx = Context(inst)
    return assemble_greens(build_covering(ctx, template, "future"), build_covering(ctx, template, "past"))


gs = greens("iso_bump", CoveringTemplate())
sp = extract_sequence_spaces(gs)
rep = verify_exact_sequence(gs, sp)
print("dims:", sp.dims)
for c in rep["checks"]:
    flag = "vacuous" if c["vacuous"] else f"{c['value']:.1e}"
    print(f"  ({c['check']}) {'pass' if c['passed'] else 'FAIL'} {flag}")

# lightcone kernel: retarded supports against the dilated cone
for tmpl in (CoveringTemplate(), CoveringTemplate(height=3, stride=1)):
    g = greens("lightcone_bump", tmpl)
    lc = lightcone_report(g)
    R = transitive_closure(build_hatR(g))
    print(f"height {tmpl.height:g} stride {tmpl.stride:g}: {lc['n_violations']} cone violations, "
          f"worst excess {lc['max_excess_over_allowed']:.2f}x allowed, "
          f"R has {int(R.pairs.sum())} pairs, transitive {R.is_transitive()}")
