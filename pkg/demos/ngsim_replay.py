"""Replay recorded traffic around a planned ego.

The bundled fixture follows the NGSIM column layout (lengths in feet). We
parse it, resample every vehicle to 0.1 s, report the subject's front and
rear gaps, then drop the subject's recorded leader and the left-lane
follower into a scenario as replayed vehicles. They follow their recorded
tracks verbatim while the ego plans around them.

    python demos/ngsim_replay.py
"""

from mfg_lane.equilibrium import SMALL_GRID, SolverParams, run_equilibrium
from mfg_lane.ngsim import default_replay_scenario, fixture_path, parse_ngsim_csv, resample_all, summarize_gaps
from mfg_lane.simulate import simulate

recs = parse_ngsim_csv(fixture_path(), imperial=True)
segs = resample_all(recs)
for vid, seg in segs.items():
    print(f"vehicle {vid}: {len(seg.states)} samples, {seg.span:.1f} s, lane {seg.lane}")
g = summarize_gaps(segs)
print(f"front gap {g['front_mean']:.1f} +/- {g['front_std']:.1f} m, rear gap {g['rear_mean']:.1f} +/- "
      f"{g['rear_std']:.1f} m over {g['n']} samples")

sc = default_replay_scenario(horizon=10.0)
eq = run_equilibrium(sc, SolverParams(**SMALL_GRID))
log, m = simulate(sc, eq)
same = all(log.states[v] == sc.replay[v].states[:log.n_points] for v in sc.replay)
print(f"replayed vehicles followed their records exactly: {same}")
print(f"ego: collisions={m.collision_count}, min distance {min(m.min_distance):.1f} m, final offset "
      f"{m.ego_final_d:.2f} m")
