"""Stacked LSTM backbone with one memory-fused layer.

Sequences are processed layer by layer.  At ``cfg.memory_layer`` the forward
direction uses the fused cell, which admits the flattened memory into the
cell state through a memory gate; the memory itself is rewritten by
:func:`nrnm.memory.nrnm_block_step` at steps ``k, k+win, ...``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ConfigError, ModelConfig
from .diffcore import DiffArray, ParamSet
from .memory import (BlockUnavailableError, MemoryState, initial_memory, init_memory_params,
                     nrnm_block_step, update_times)

GATES = ("i", "f", "o", "c")


def layer_prefix(layer: int, direction: str = "f") -> str:
    return f"lstm{layer}{direction}."


def layer_params(ps, prefix: str) -> dict[str, DiffArray]:
    return {k[len(prefix):]: v for k, v in ps.items() if k.startswith(prefix)}


def init_lstm_layer(ps: ParamSet, prefix: str, input_dim: int, hidden: int,
                    rng: np.random.Generator, mem_width: int | None = None) -> None:
    bound = 1.0 / math.sqrt(hidden)
    for g in GATES:
        ps.add(f"{prefix}W_{g}", rng.uniform(-bound, bound, (hidden, input_dim)))
    for g in GATES:
        ps.add(f"{prefix}U_{g}", rng.uniform(-bound, bound, (hidden, hidden)))
    for g in GATES:
        ps.add(f"{prefix}b_{g}", np.full((1, hidden), 1.0 if g == "f" else 0.0))
    if mem_width is not None:
        mb = 1.0 / math.sqrt(mem_width)
        ps.add(prefix + "W_m", rng.uniform(-bound, bound, (hidden, input_dim)))
        ps.add(prefix + "U_m", rng.uniform(-mb, mb, (hidden, mem_width)))
        ps.add(prefix + "b_m", np.zeros((1, hidden)))
        ps.add(prefix + "P_m", rng.uniform(-mb, mb, (hidden, mem_width)))


def init_backbone_params(ps: ParamSet, cfg: ModelConfig, rng: np.random.Generator) -> None:
    mem_width = cfg.units * cfg.memory_dim
    dirs = ("f", "b") if cfg.bidirectional else ("f",)
    in_dim = cfg.input_dim
    for layer in range(1, cfg.num_layers + 1):
        for d in dirs:
            fused = cfg.memory and layer == cfg.memory_layer and d == "f"
            init_lstm_layer(ps, layer_prefix(layer, d), in_dim, cfg.hidden, rng,
                            mem_width if fused else None)
        in_dim = cfg.rep_dim
    if cfg.memory:
        init_memory_params(ps, cfg, rng)


# cells ---------------------------------------------------------------------

class _CellWeights:
    """Gate matrices stacked once per forward pass: one matmul per step."""

    def __init__(self, lp: dict[str, DiffArray]):
        self.hidden = lp["U_i"].rows
        self.fused = "W_m" in lp
        W = [lp[f"W_{g}"] for g in GATES]
        U = [lp[f"U_{g}"] for g in GATES]
        b = [lp[f"b_{g}"] for g in GATES]
        if self.fused:
            W.append(lp["W_m"])
            U.append(dc.constant(np.zeros((self.hidden, self.hidden), dtype=dc.get_dtype())))
            b.append(lp["b_m"])
            self.U_m, self.P_m = lp["U_m"], lp["P_m"]
        self.WT = dc.transpose(dc.concat_rows(W))
        self.UT = dc.transpose(dc.concat_rows(U))
        self.b = dc.concat_cols(b)
        self.input_dim = self.WT.rows

    def memory_terms(self, M: DiffArray, batch: int) -> tuple[DiffArray, DiffArray]:
        v_m = dc.reshape(M, batch, M.value.size // batch)
        if v_m.cols != self.U_m.cols:
            raise dc.DimensionError(f"flattened memory width {v_m.cols} != {self.U_m.cols}")
        return (dc.matmul(v_m, dc.transpose(self.U_m)), dc.matmul(v_m, dc.transpose(self.P_m)))

    def step(self, x, h_prev, c_prev, mem=None, return_gates=False):
        if x.cols != self.input_dim or h_prev.cols != self.hidden or c_prev.cols != self.hidden:
            raise dc.DimensionError(
                f"cell expects input {self.input_dim}/hidden {self.hidden}, got "
                f"x {x.shape}, h {h_prev.shape}, c {c_prev.shape}")
        H = self.hidden
        a = dc.add(dc.add(dc.matmul(x, self.WT), dc.matmul(h_prev, self.UT)), self.b)
        gates = dc.sigmoid(dc.slice_cols(a, 0, 3 * H))
        gi = dc.slice_cols(gates, 0, H)
        gf = dc.slice_cols(gates, H, 2 * H)
        go = dc.slice_cols(gates, 2 * H, 3 * H)
        cand = dc.tanh(dc.slice_cols(a, 3 * H, 4 * H))
        c = gf * c_prev + gi * cand
        gm = None
        if self.fused:
            mem_gate, mem_val = mem
            gm = dc.sigmoid(dc.slice_cols(a, 4 * H, 5 * H) + mem_gate)
            c = c + gm * mem_val
        h = go * dc.tanh(c)
        if return_gates:
            return h, c, {"i": gi, "f": gf, "o": go, "m": gm}
        return h, c


def lstm_cell_step(x, h_prev, c_prev, params: dict[str, DiffArray]):
    """One plain LSTM step; rows are batch entries.  Returns ``(h, c)``."""
    lp = {k: v for k, v in params.items() if k[:2] in ("W_", "U_", "b_") and k[2] in "ifoc"}
    return _CellWeights(lp).step(dc.constant(x), dc.constant(h_prev), dc.constant(c_prev))


def fused_cell_step(x, h_prev, c_prev, M_prev, params: dict[str, DiffArray]):
    """LSTM step whose cell state also takes the gated, projected memory.

    ``M_prev`` is a :class:`MemoryState` or its ``[B*units x m]`` matrix.
    Returns ``(r, c)``.
    """
    x, h_prev, c_prev = dc.constant(x), dc.constant(h_prev), dc.constant(c_prev)
    M = M_prev.M if isinstance(M_prev, MemoryState) else dc.constant(M_prev)
    w = _CellWeights(params)
    return w.step(x, h_prev, c_prev, w.memory_terms(M, x.rows))


def apply_zoneout(h_new, h_prev, c_new, c_prev, rate: float, rng=None, training: bool = True):
    """Keep each previous coordinate with probability ``rate`` (training only)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"zoneout rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return h_new, c_new
    keep_h = (rng.random(h_new.shape) < rate).astype(dc.get_dtype())
    keep_c = (rng.random(c_new.shape) < rate).astype(dc.get_dtype())
    h = h_new + dc.constant(keep_h) * (h_prev - h_new)
    c = c_new + dc.constant(keep_c) * (c_prev - c_new)
    return h, c


# sequences -----------------------------------------------------------------

@dataclass
class SequenceOutput:
    reps: list[DiffArray]  # per step, [B x rep_dim]
    memory: MemoryState | None
    updates: list[int]

    def stacked(self) -> DiffArray:
        """Representations as one ``[T x rep]`` array (batch of one)."""
        return dc.concat_rows(self.reps)


def _as_steps(x) -> list[DiffArray]:
    """[B, T, d] array (or [T, d] for one sequence) -> per-step [B x d] constants."""
    if isinstance(x, (list, tuple)):
        return [dc.constant(s) for s in x]
    x = np.asarray(x, dtype=dc.get_dtype())
    if x.ndim == 2:
        x = x[None]
    return [dc.constant(np.ascontiguousarray(x[:, t, :])) for t in range(x.shape[1])]


def _reverse_perm(lengths: np.ndarray, T: int, t: int) -> np.ndarray:
    """Row index in step-stacked [T*B] order feeding reversed step ``t``."""
    B = len(lengths)
    src = np.where(t < lengths, lengths - 1 - t, t)
    return src * B + np.arange(B)


def _reverse_steps(steps: list[DiffArray], lengths: np.ndarray) -> list[DiffArray]:
    T = len(steps)
    stacked = dc.concat_rows(steps)
    return [dc.take_rows(stacked, _reverse_perm(lengths, T, t)) for t in range(T)]


def _dropout(x: DiffArray, rate: float, rng) -> DiffArray:
    keep = (rng.random(x.shape) >= rate).astype(dc.get_dtype()) / (1.0 - rate)
    return x * dc.constant(keep)


def _run_plain(steps, w: _CellWeights, zoneout: float, rng, training: bool):
    B = steps[0].rows
    zeros = dc.constant(np.zeros((B, w.hidden), dtype=dc.get_dtype()))
    h, c = zeros, zeros
    out = []
    for x in steps:
        hn, cn = w.step(x, h, c)
        h, c = apply_zoneout(hn, h, cn, c, zoneout, rng, training)
        out.append(h)
    return out


def run_batch(x, params, cfg: ModelConfig, lengths=None, training: bool = False,
              rng: np.random.Generator | None = None) -> SequenceOutput:
    """Run the backbone (and memory) over a padded batch.

    ``x`` is ``[B, T, d]`` (or per-step ``[B x d]`` arrays).  Padded steps
    are computed but never read by the heads.
    """
    steps = _as_steps(x)
    T = len(steps)
    B = steps[0].rows
    if T < 1:
        raise ConfigError("sequence must have at least one step")
    if steps[0].cols != cfg.input_dim:
        raise dc.DimensionError(f"input width {steps[0].cols} != input_dim {cfg.input_dim}")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.intp)
    if training and rng is None:
        raise ConfigError("training mode needs an rng")
    zo = cfg.zoneout if training else 0.0
    use_memory = cfg.memory
    if use_memory and T < cfg.k:
        if cfg.strict:
            raise BlockUnavailableError(f"sequence shorter than block (T={T} < k={cfg.k})")
    schedule = set(update_times(T, cfg.k, cfg.win)) if use_memory else set()
    memory = None
    updates: list[int] = []

    layer_in = steps
    for layer in range(1, cfg.num_layers + 1):
        if layer > 1 and training and cfg.dropout > 0:
            layer_in = [_dropout(s, cfg.dropout, rng) for s in layer_in]
        bwd_out = None
        if cfg.bidirectional:
            wb = _CellWeights(layer_params(params, layer_prefix(layer, "b")))
            rev = _run_plain(_reverse_steps(layer_in, lengths), wb, zo, rng, training)
            bwd_out = _reverse_steps(rev, lengths)
        wf = _CellWeights(layer_params(params, layer_prefix(layer, "f")))
        if wf.fused:
            fwd_out, memory, updates = _run_fused(layer_in, steps, wf, params, cfg, schedule,
                                                  bwd_out, zo, rng, training)
        else:
            fwd_out = _run_plain(layer_in, wf, zo, rng, training)
        if bwd_out is None:
            layer_in = fwd_out
        else:
            layer_in = [dc.concat_cols([a, b]) for a, b in zip(fwd_out, bwd_out)]
    return SequenceOutput(layer_in, memory, updates)


def _run_fused(layer_in, raw_inputs, w: _CellWeights, params, cfg: ModelConfig, schedule,
               bwd_out, zoneout, rng, training):
    B = layer_in[0].rows
    zeros = dc.constant(np.zeros((B, w.hidden), dtype=dc.get_dtype()))
    h, c = zeros, zeros
    memory = initial_memory(B, cfg.units, cfg.memory_dim, cfg.stride_set)
    mem_terms = w.memory_terms(memory.M, B)
    out: list[DiffArray] = []
    updates = []
    for t, x in enumerate(layer_in, start=1):
        hn, cn = w.step(x, h, c, mem_terms)
        h, c = apply_zoneout(hn, h, cn, c, zoneout, rng, training)
        out.append(h)
        if t in schedule:
            memory = nrnm_block_step(out, raw_inputs, t, memory, cfg, params, bwd_out)
            mem_terms = w.memory_terms(memory.M, B)
            updates.append(t)
    return out, memory, updates


def run_sequence(seq, params, cfg: ModelConfig) -> tuple[DiffArray, MemoryState | None]:
    """Evaluation-mode pass over one ``[T x d]`` sequence.

    Returns the ``[T x rep_dim]`` representations and the final memory.
    """
    out = run_batch(np.asarray(seq)[None], params, cfg)
    return out.stacked(), out.memory
