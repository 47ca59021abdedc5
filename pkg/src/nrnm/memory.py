"""Sliding non-local memory: block attention, multi-scale fusion, gated update.

All functions work on a batch of ``B`` sequences stacked along rows.  A
memory matrix for the batch is ``[B*units x m]`` with each sequence owning a
contiguous group of ``units`` rows.  Per-step sequence data is passed as a
list of ``[B x dim]`` arrays (index 0 is time step 1); a single ``[T x dim]``
array is accepted too and treated as a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig
from .diffcore import DiffArray, ParamSet


class BlockUnavailableError(ValueError):
    """The requested memory block reaches before the start of the sequence."""


@dataclass
class MemoryState:
    M: DiffArray
    last_update_t: int = 0
    strides: tuple[int, ...] = field(default_factory=tuple)


def initial_memory(batch: int, units: int, dim: int, strides=()) -> MemoryState:
    return MemoryState(dc.constant(np.zeros((batch * units, dim), dtype=dc.get_dtype())), 0,
                       tuple(strides))


def update_times(T: int, k: int, win: int) -> list[int]:
    """Steps (1-based) at which the memory is rewritten: k, k+win, ... <= T."""
    return list(range(k, T + 1, win))


def block_indices(t: int, k: int, s: int) -> list[int]:
    """1-based steps sampled from the block ending at ``t``; newest step first kept."""
    if s < 1 or k % s:
        raise ConfigError(f"stride {s} must divide block size {k}")
    if t < k:
        raise BlockUnavailableError(f"block of size {k} unavailable at t={t}")
    return list(range(t - k + s, t + 1, s))


def _steps(x) -> list[DiffArray]:
    if isinstance(x, DiffArray):
        return [dc.take_rows(x, [i]) for i in range(x.rows)]
    if isinstance(x, np.ndarray):
        return [dc.constant(x[i:i + 1]) for i in range(x.shape[0])]
    return list(x)


# parameters ----------------------------------------------------------------

def init_memory_params(ps: ParamSet, cfg: ModelConfig, rng: np.random.Generator,
                       prefix: str = "nrnm.") -> None:
    m, H, d, u = cfg.memory_dim, cfg.hidden, cfg.input_dim, cfg.units

    def unif(rows, cols):
        bound = 1.0 / math.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    for s in cfg.stride_set:
        p = f"{prefix}s{s}."
        ps.add(p + "E_h", unif(m, H))
        ps.add(p + "E_x", unif(m, d))
        if cfg.bidirectional:
            ps.add(p + "E_b", unif(m, H))
        for name in ("W_q", "W_k", "W_v"):
            ps.add(p + name, unif(m, m))
        ps.add(p + "ln1_g", np.ones((1, m)))
        ps.add(p + "ln1_b", np.zeros((1, m)))
        ps.add(p + "W_ff", unif(m, m))
        ps.add(p + "b_ff", np.zeros((1, m)))
        ps.add(p + "ln2_g", np.ones((1, m)))
        ps.add(p + "ln2_b", np.zeros((1, m)))
    n = len(cfg.stride_set)
    if n > 1:
        for name in ("W_q", "W_k", "W_v"):
            ps.add(f"{prefix}fuse.{name}", unif(m, m))
        ps.add(f"{prefix}fuse.W_fc", unif(m, n * m))
        ps.add(f"{prefix}fuse.b_fc", np.zeros((1, m)))
    zdim = cfg.k * d + u * m
    ps.add(prefix + "W_im", unif(u * m, zdim))
    ps.add(prefix + "B_im", np.zeros((1, u * m)))
    ps.add(prefix + "W_fm", unif(u * m, zdim))
    ps.add(prefix + "B_fm", np.ones((1, u * m)))


def scale_params(ps, s: int, prefix: str = "nrnm.") -> dict[str, DiffArray]:
    p = f"{prefix}s{s}."
    return {k[len(p):]: v for k, v in ps.items() if k.startswith(p)}


def fuse_params(ps, prefix: str = "nrnm.") -> dict[str, DiffArray]:
    p = prefix + "fuse."
    return {k[len(p):]: v for k, v in ps.items() if k.startswith(p)}


def gate_params(ps, prefix: str = "nrnm.") -> dict[str, DiffArray]:
    return {k: ps[prefix + k] for k in ("W_im", "B_im", "W_fm", "B_fm")}


# operations ----------------------------------------------------------------

def _batch_major(n_groups: int, per_group: int, batch: int) -> np.ndarray:
    """Permutation turning (group, step, batch) row order into (batch, group, step)."""
    g, j, b = np.meshgrid(np.arange(n_groups), np.arange(per_group), np.arange(batch),
                          indexing="ij")
    old = (g * per_group * batch + j * batch + b)
    return old.transpose(2, 0, 1).reshape(-1)


def select_block_sources(hiddens, inputs, t: int, k: int, s: int, sp: dict[str, DiffArray],
                         bwd_hiddens=None) -> tuple[DiffArray, list[int]]:
    """Embed the strided hidden/input units of the block ending at ``t``.

    Returns ``C`` of shape ``[B * groups * (k/s) x m]`` (per sequence: the
    hidden units, then the input units, then backward hidden units if given)
    and the 1-based step indices used.
    """
    idx = block_indices(t, k, s)
    hiddens, inputs = _steps(hiddens), _steps(inputs)
    if t > len(hiddens) or t > len(inputs):
        raise BlockUnavailableError(f"t={t} beyond sequence length {len(hiddens)}")
    streams = [(hiddens, sp["E_h"]), (inputs, sp["E_x"])]
    if bwd_hiddens is not None:
        streams.append((_steps(bwd_hiddens), sp["E_b"]))
    batch = hiddens[0].rows
    parts = [dc.matmul(dc.concat_rows([seq[i - 1] for i in idx]), dc.transpose(E))
             for seq, E in streams]
    C = dc.concat_rows(parts)
    if batch > 1:
        C = dc.take_rows(C, _batch_major(len(streams), len(idx), batch))
    return C, idx


def attention(X: DiffArray, Wq, Wk, Wv, heads: int, groups: int):
    """Multi-head scaled dot-product self-attention inside each row group.

    Returns the concatenated head outputs and the per-head weight matrices
    (each ``[groups*n x n]``).
    """
    m = Wq.rows
    mh = m // heads
    Q = dc.matmul(X, dc.transpose(Wq))
    K = dc.matmul(X, dc.transpose(Wk))
    V = dc.matmul(X, dc.transpose(Wv))
    scale = 1.0 / math.sqrt(mh)
    outs, weights = [], []
    for h in range(heads):
        if heads == 1:
            q, kk, v = Q, K, V
        else:
            lo, hi = h * mh, (h + 1) * mh
            q, kk, v = dc.slice_cols(Q, lo, hi), dc.slice_cols(K, lo, hi), dc.slice_cols(V, lo, hi)
        w = dc.softmax_rows(dc.group_matmul(q, kk, groups, transpose_b=True) * scale)
        weights.append(w)
        outs.append(dc.group_matmul(w, v, groups))
    return (outs[0] if heads == 1 else dc.concat_cols(outs)), weights


def _canonical_order(x: np.ndarray, batch: int) -> np.ndarray:
    """Row order that sorts each group's rows lexicographically by value."""
    group = np.repeat(np.arange(batch), x.shape[0] // batch)
    return np.lexsort(tuple(x.T[::-1]) + (group,))


def distill_memory(C: DiffArray, sp: dict[str, DiffArray], heads: int, batch: int = 1,
                   retain: int | None = None, eps: float = 1e-5):
    """Block self-attention + residual/layer-norm + position-wise FC.

    Returns ``(M_tilde, W_att)``.  With ``retain`` only the first ``retain``
    rows of each sequence's group (the forward hidden-state queries) are kept.

    Sources are processed in a canonical (value-sorted) order and mapped back,
    so permuting the sources permutes the output bit for bit.  ``W_att`` is
    diagnostic and carries no gradient.
    """
    n = C.rows // batch
    order = _canonical_order(C.value, batch)
    inv = np.argsort(order)
    Cc = dc.take_rows(C, order)
    M_att, weights = attention(Cc, sp["W_q"], sp["W_k"], sp["W_v"], heads, batch)
    M1 = dc.layer_norm(Cc + M_att, sp["ln1_g"], sp["ln1_b"], eps)
    ff = dc.relu(dc.add(dc.matmul(M1, dc.transpose(sp["W_ff"])), sp["b_ff"]))
    M2 = dc.take_rows(dc.layer_norm(M1 + ff, sp["ln2_g"], sp["ln2_b"], eps), inv)
    local = (inv - np.repeat(np.arange(batch) * n, n)).reshape(batch, n)
    weights = [dc.constant(np.stack([w.value[b * n:(b + 1) * n][np.ix_(local[b], local[b])]
                                     for b in range(batch)]).reshape(batch * n, n))
               for w in weights]
    if retain is not None:
        keep = (np.arange(batch)[:, None] * n + np.arange(retain)[None, :]).reshape(-1)
        M2 = dc.take_rows(M2, keep)
    return M2, weights


def update_memory_state(M_tilde: DiffArray, M_prev: DiffArray, block_inputs: DiffArray,
                        gp: dict[str, DiffArray], return_gates: bool = False):
    """``M = G_i * tanh(M_tilde) + G_f * M_prev`` with gates from inputs and M_prev.

    ``block_inputs`` is ``[B x k*d]`` (the block's raw inputs, flattened per
    sequence); memories are ``[B*units x m]``.
    """
    if M_tilde.shape != M_prev.shape:
        raise dc.DimensionError(f"memory shapes differ: {M_tilde.shape} vs {M_prev.shape}")
    batch = block_inputs.rows
    if M_prev.rows % batch:
        raise dc.DimensionError(f"memory {M_prev.shape} does not split into {batch} sequences")
    units, m = M_prev.rows // batch, M_prev.cols
    z = dc.concat_cols([block_inputs, dc.reshape(M_prev, batch, units * m)])
    if z.cols != gp["W_im"].cols:
        raise dc.DimensionError(f"gate input width {z.cols} != {gp['W_im'].cols}")
    gi = dc.sigmoid(dc.add(dc.matmul(z, dc.transpose(gp["W_im"])), gp["B_im"]))
    gf = dc.sigmoid(dc.add(dc.matmul(z, dc.transpose(gp["W_fm"])), gp["B_fm"]))
    gi = dc.reshape(gi, batch * units, m)
    gf = dc.reshape(gf, batch * units, m)
    M = gi * dc.tanh(M_tilde) + gf * M_prev
    if return_gates:
        return M, gi, gf
    return M


def multiscale_fuse(memories, fp: dict[str, DiffArray], active=None):
    """Fuse per-scale memories row by row: attention across scales, concat, FC.

    ``memories`` holds one ``[R x m]`` array per configured scale (``None``
    allowed for inactive ones).  Inactive scales neither attend nor are
    attended to; their slot in the concatenation is zero.  Returns the fused
    ``[R x m]`` memory and the ``[R*n_active x n_active]`` attention weights.
    """
    n = len(memories)
    if active is None:
        active = [mem is not None for mem in memories]
    act = [i for i in range(n) if active[i]]
    if not act:
        raise BlockUnavailableError("no active scale to fuse")
    shapes = {memories[i].shape for i in act}
    if len(shapes) != 1:
        raise ConfigError(f"scale memories differ in shape: {sorted(shapes)}")
    R, m = memories[act[0]].shape
    if fp["W_fc"].cols != n * m:
        raise ConfigError(f"fusion FC expects {fp['W_fc'].cols // m} scales, got {n}")
    na = len(act)
    X = dc.concat_rows([memories[i] for i in act])
    if na > 1:
        X = dc.take_rows(X, np.arange(na * R).reshape(na, R).T.reshape(-1))
    Y, weights = attention(X, fp["W_q"], fp["W_k"], fp["W_v"], 1, R)
    Y = dc.reshape(Y, R, na * m)
    WfcT = dc.transpose(fp["W_fc"])
    if na < n:
        WfcT = dc.take_rows(WfcT, np.concatenate([np.arange(i * m, (i + 1) * m) for i in act]))
    out = dc.add(dc.matmul(Y, WfcT), fp["b_fc"])
    return out, weights[0]


def nrnm_block_step(hiddens, inputs, t: int, M_prev: MemoryState, cfg: ModelConfig,
                    ps, bwd_hiddens=None, prefix: str = "nrnm.") -> MemoryState:
    """One memory update at step ``t``: per-scale distillation, fusion, gated update."""
    hiddens, inputs = _steps(hiddens), _steps(inputs)
    if bwd_hiddens is not None:
        bwd_hiddens = _steps(bwd_hiddens)
    if t < cfg.k:
        raise BlockUnavailableError(f"memory block of size {cfg.k} unavailable at t={t}")
    batch = hiddens[0].rows
    tildes: list[DiffArray | None] = []
    for s in cfg.stride_set:
        kb = cfg.block_size(s)
        if t < kb:
            tildes.append(None)
            continue
        sp = scale_params(ps, s, prefix)
        C, _ = select_block_sources(hiddens, inputs, t, kb, s, sp, bwd_hiddens)
        Mt, _ = distill_memory(C, sp, cfg.heads, batch, retain=cfg.units, eps=cfg.ln_eps)
        tildes.append(Mt)
    if all(x is None for x in tildes):
        raise BlockUnavailableError(f"no scale has a complete block at t={t}")
    if len(tildes) == 1:
        M_tilde = tildes[0]
    else:
        M_tilde, _ = multiscale_fuse(tildes, fuse_params(ps, prefix))
    block_inputs = dc.concat_cols(inputs[t - cfg.k:t])
    M = update_memory_state(M_tilde, M_prev.M, block_inputs, gate_params(ps, prefix))
    return MemoryState(M, t, tuple(cfg.stride_set))
