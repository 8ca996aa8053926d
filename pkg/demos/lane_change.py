"""One lane change from start to finish on a coarse grid.

The ego sits between a front and a rear car on the current lane and must
merge left. The pipeline is: solve the mean-field equilibrium, sample
candidate paths, score them against the equilibrium density, then drive
everyone in closed loop with the selected path.

A coarse 40x9 grid keeps this to a few seconds; the CLI uses 150x15.

    python demos/lane_change.py [combo1 .. combo6]
"""

import sys

from mfg_lane.core import build_scenario
from mfg_lane.equilibrium import SMALL_GRID, SolverParams, run_equilibrium
from mfg_lane.simulate import plan_from_equilibrium, simulate

name = sys.argv[1] if len(sys.argv) > 1 else "combo1"
sc = build_scenario(name)
eq = run_equilibrium(sc, SolverParams(**SMALL_GRID))
print(f"{name}: equilibrium after {eq.iterations} iterations, residual {eq.residuals[-1]:.1e}")

x0 = sc.initial_states()[sc.ego_id]
plan = plan_from_equilibrium(sc, eq, x0)
if plan.selected is None:
    print("no admissible path; the ego keeps its lane")
else:
    ev = plan.evaluations[plan.index]
    print(f"picked candidate {plan.index} of {len(plan.candidates)}: cost {ev.total:.2f}, "
          f"closest approach {ev.min_distance:.1f} m")
    for k, v in ev.breakdown.items():
        print(f"    {k:12s} {v:10.3f}")

log, m = simulate(sc, eq, plan)
print(f"closed loop: collisions={m.collision_count}, steps per band={m.histogram}, "
      f"lane change done at {m.lane_change_time} s, final offset {m.ego_final_d:.2f} m")
