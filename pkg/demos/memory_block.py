"""Walk through one memory update by hand.

Runs a short random sequence through a one-layer model, then recomputes the
memory at the first update step from its pieces: source selection, attention
distillation, and the gated update.  Prints shapes and the attention pattern.
"""
import numpy as np

from nrnm import diffcore as dc
from nrnm.backbone import run_sequence
from nrnm.config import ModelConfig
from nrnm.memory import (distill_memory, gate_params, initial_memory, scale_params,
                         select_block_sources, update_memory_state, update_times)
from nrnm.model import build_params

cfg = ModelConfig(num_layers=1, hidden=8, input_dim=3, k=4, stride_set=(1,), l=4, win=2,
                  heads=2, dropout=0.0, zoneout=0.0)
ps = build_params(cfg)
xs = np.random.default_rng(0).normal(size=(12, 3))

print("memory updates at steps", update_times(12, cfg.k, cfg.win))
reps, mem = run_sequence(xs, ps, cfg)
print("representations", reps.shape, "final memory", mem.M.shape)

# before the first update the memory is zero, so the first k hidden states
# are exactly those the block at t = k distills
sp = scale_params(ps, 1)
C, idx = select_block_sources(reps.value, xs, cfg.k, cfg.k, 1, sp)
print("block time indices", idx, "source matrix", C.shape)
M_tilde, W = distill_memory(C, sp, cfg.heads, retain=cfg.l)
for h, w in enumerate(W):
    print(f"head {h} attention (rows sum to 1):")
    print(np.array2string(w.value, precision=2, suppress_small=True))
M0 = initial_memory(1, cfg.l, cfg.memory_dim).M
block = dc.constant(xs[:cfg.k].reshape(1, -1))
M1, gi, gf = update_memory_state(M_tilde, M0, block, gate_params(ps), return_gates=True)
print(f"input gate mean {gi.value.mean():.3f}, forget gate mean {gf.value.mean():.3f}")
print(f"|M| max {np.abs(M1.value).max():.3f} (bounded by 1 from a zero start)")
