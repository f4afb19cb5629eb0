"""Closed-loop run over rolling hills with rocks, mapping from simulated lidar.

The goal starts outside the sensed region, so the robot plans into a partly
inpainted map and replans as terrain comes into view.

Run:  python3 demos/hills_run.py
"""

import tempfile
from pathlib import Path

import numpy as np

from se2nav.harness import run_scenario
from se2nav.scenario import load_scenario

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "hills_with_rocks.yaml"

sc = load_scenario(CONFIG)
out = Path(tempfile.mkdtemp(prefix="se2nav_hills_"))
result = run_scenario(sc, out)
m = result.metrics
print(f"success={m.success} ({m.failure or 'reached goal'}), goal error {m.goal_error:.3f} m")

for p in result.plans:
    print(f"  t={p.sim_time:5.1f} s  plan {p.index}: {p.n_switches} switch(es), T_f={p.T_f:.2f} s, "
          f"t_p={p.t_p_ms:.0f} ms")

# how much of the final planning window had actually been observed
with np.load(out / sc.name / "map_snapshot.npz") as snap:
    print(f"observed fraction of last window: {snap['known'].mean():.2f}, "
          f"max risk {np.nanmax(snap['risk']):.2f}")
