"""Verify the hand-written backward passes against finite differences.

Builds the tiny model with every head attached, samples 200 parameter
coordinates (at least one from each tensor) and compares analytic gradients
with central differences.
"""
from nrnm.config import ModelConfig
from nrnm.model import ALL_HEADS, build_params, gradient_check

cfg = ModelConfig(num_layers=2, hidden=4, input_dim=3, memory_dim=4, k=4, stride_set=(1, 2),
                  l=2, win=2, heads=2, dropout=0.0, zoneout=0.0, num_classes=3)
ps = build_params(cfg, heads=ALL_HEADS)
print(f"{len(ps)} parameter tensors, {ps.size()} scalars")
for group in sorted({name.split(".")[0] for name in ps}):
    print(f"  {group}: {sum(1 for n in ps if n.startswith(group + '.'))} tensors")

err = gradient_check(cfg, sample=200, T=12)
print(f"max relative error over 200 coordinates: {err:.2e}")
print("PASS" if err < 1e-5 else "FAIL")
