"""Two vehicles, one small grid: watch the forward-backward iteration settle.

The fixture puts the ego and one normal-style car on adjacent lanes. We run
the relaxed fixed point, print the residual history, estimate the
contraction ratio, then ask whether either style could do better by
deviating alone (the best-response gap). Finally we nudge the style
parameters and see how far the equilibrium density moves.

    python demos/two_vehicle_equilibrium.py
"""

from mfg_lane.equilibrium import SMALL_GRID, SolverParams, nash_gap, perturbation_test, run_equilibrium, \
    two_vehicle_fixture

params = SolverParams(warm_start=0, **SMALL_GRID)
scenario = two_vehicle_fixture()
eq = run_equilibrium(scenario, params)

print("iteration  residual")
for i, r in enumerate(eq.residuals, 1):
    print(f"{i:9d}  {r:.3e}")
print(f"fitted contraction ratio: {eq.contraction:.3f} (converged={eq.converged})")

# Any gain from a unilateral re-solve should be round-off.
gap, rel = nash_gap(eq)
print(f"best-response gap: {gap:.2e} absolute, {rel:.2e} relative")

# Density distance grows roughly linearly with the size of the style nudge.
for row in perturbation_test(scenario, (0.01, 0.02, 0.04), params, base=eq):
    print(f"delta={row['delta']:.2f}  distance={row['distance']:.4f}  ratio={row['distance'] / row['delta']:.2f}")
