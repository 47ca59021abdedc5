"""Sweep the memory block size k on the copy task and write a CSV.

Usage: python3 demos/block_size_sweep.py [--steps N] [--out ablation_k.csv]
"""
import argparse
import logging

from nrnm.config import DatasetSpec, ModelConfig
from nrnm.data import generate
from nrnm.trainer import sweep_block_size

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=3000)
p.add_argument("--out", default="ablation_k.csv")
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

tr = generate(DatasetSpec(task="copy", T=60, samples=2000, seed=0))
ev = generate(DatasetSpec(task="copy", T=60, samples=500, seed=1))
base = ModelConfig(task="copy", input_dim=tr.input_dim, num_classes=8, hidden=64, k=8, win=4,
                   stride_set=(1,), l=8, heads=4, steps=args.steps, eval_every=100, stop_at=1.0)
for row in sweep_block_size(base, [2, 4, 8, 12], tr, ev, path=args.out):
    print(f"k={row['k']:2d} accuracy {row['accuracy']:.3f}")
print("wrote", args.out)
