"""Drive 5 m straight ahead on flat ground and look at what the loop recorded.

Run:  python3 demos/flat_run.py
"""

import tempfile
from pathlib import Path

from se2nav.harness import run_scenario
from se2nav.scenario import load_scenario

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "flat_straight.yaml"

sc = load_scenario(CONFIG)
out = Path(tempfile.mkdtemp(prefix="se2nav_flat_"))
result = run_scenario(sc, out)
m = result.metrics

print(f"scenario {sc.name}: success={m.success}  T_f={m.T_f:.2f} s  length={m.l_traj:.3f} m")
print(f"{m.n_plans} plan(s), {m.n_switches} gear switch(es), worst audit {m.audit_worst:.2e}")
# each plan carries its own search and optimization timing
for p in result.plans:
    print(f"  plan {p.index} at t={p.sim_time:.1f} s: T_f={p.T_f:.2f} s, "
          f"search {p.search_ms:.1f} ms + optimize {p.optimize_ms:.1f} ms, converged={p.solver['converged']}")
print("exports in", out / sc.name)
