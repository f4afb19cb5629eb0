"""Time the full mapping update (fusion, inpainting, SE(2) assessment) per map size.

Run:  python3 demos/mapping_throughput.py
"""

from se2nav.harness import is_monotone, throughput_bench

rows = throughput_bench([6.0, 10.0, 14.0], yaws=(8, 16), repeats=3)
print(f"{'size':>6} {'yaws':>5} {'states':>8} {'median ms':>10} {'assess ms':>10}")
for r in rows:
    print(f"{r.size_m:6.1f} {r.n_yaw:5d} {r.n_states:8d} {r.median_ms:10.1f} {r.assess_ms:10.1f}")
print("monotone in state count:", is_monotone(rows))
