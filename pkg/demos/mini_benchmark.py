"""A small version of the moderate-terrain benchmark: 3 terrains x 3 start/goal pairs.

The full run (20 terrains x 10 pairs) is ``se2nav bench configs/bench_moderate.yaml --trials 10``.

Run:  python3 demos/mini_benchmark.py
"""

from se2nav.harness import BatchConfig, benchmark

batch = BatchConfig.from_dict({"terrains": 3})
res = benchmark(batch, 3, seed=0, progress=lambda run: print(f"  {run.name}: {run.failure or 'ok'}"))

for row in res.class_summary():
    print(f"{row['class']}: success {row['success_rate']:.2f}, mean t_p {row['mean_t_p_ms']:.1f} ms")
