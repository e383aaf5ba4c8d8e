"""The four-way ablation (render only, PoRF, EG, PoRF + EG) on the small orbit.

    python demos/ablation_small.py [iterations]
"""
import sys

from porf import trainer as T
from porf.harness import BenchmarkSpec, make_benchmark

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
data = make_benchmark(BenchmarkSpec(n_frames=12, width=64, height=64, per_pair_count=100))
cfg = T.TrainConfig(iterations=iters, rays=256, samples=24, pretrain_steps=200, log_every=50)
rows = T.ablate(cfg, data, progress=lambda it, log: print(".", end="", flush=True))
print()
print(T.format_ablation(rows, cfg), end="")
