"""Refine noisy poses of a small orbit with the full method and report the error curve.

A 12-frame, 64 px version of the benchmark keeps this to about a minute.

    python demos/refine_small.py [iterations]
"""
import sys

from porf import trainer as T
from porf.harness import BenchmarkSpec, make_benchmark

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
data = make_benchmark(BenchmarkSpec(n_frames=12, width=64, height=64, per_pair_count=100))
cfg = T.TrainConfig(mode="full", iterations=iters, rays=256, samples=24, pretrain_steps=200, log_every=50)


def show(it, log):
    row = log.rows[-1]
    print(f"iter {it:>5}  colour {row['l_colour']:.4f}  eg {row['l_eg']:.3f}  "
          f"rot {row['rot_err_deg']:.4f} deg  trans {row['trans_err']:.2f}")


res = T.train(cfg, data, progress=show)
print(f"rotation error {res.log.initial_rot:.4f} -> {res.log.rows[-1]['rot_err_deg']:.4f} deg")
