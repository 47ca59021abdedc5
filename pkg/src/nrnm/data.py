"""Synthetic long-range tasks, padding/batching, and the JSON Lines format.

Datasets are drawn from SplitMix64 (Steele, Lea & Flood 2014): a 64-bit
state advanced by 0x9E3779B97F4A7C15 and finalised with the
(30, 0xBF58476D1CE4E5B9, 27, 0x94D049BB133111EB, 31) mixer.  Sample ``i`` of
a dataset with seed ``s`` uses its own stream seeded by
``mix(s * 0x9E3779B97F4A7C15 + i)``, so samples can be generated
independently and in any order.  Uniform doubles take the top 53 bits;
bounded integers use Lemire's multiply-high reduction; normals use
Box-Muller.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetSpec

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def for_sample(cls, seed: int, index: int) -> "SplitMix64":
        return cls(_mix((seed * GOLDEN + index) & MASK64))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def normal(self) -> float:
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@dataclass
class SequenceBatch:
    task: str
    x: list[np.ndarray]
    labels: list  # int per sequence/pair, or int array per step
    lengths: list[int] = field(default_factory=list)
    mask: list[np.ndarray] | None = None
    x2: list[np.ndarray] | None = None
    lengths2: list[int] | None = None

    def __post_init__(self):
        if not self.lengths:
            self.lengths = [len(s) for s in self.x]
        if self.x2 is not None and not self.lengths2:
            self.lengths2 = [len(s) for s in self.x2]

    def __len__(self) -> int:
        return len(self.x)

    @property
    def input_dim(self) -> int:
        return self.x[0].shape[1] if self.x else 0

    def subset(self, idx) -> "SequenceBatch":
        pick = lambda seq: None if seq is None else [seq[i] for i in idx]  # noqa: E731
        return SequenceBatch(self.task, pick(self.x), pick(self.labels), pick(self.lengths),
                             pick(self.mask), pick(self.x2), pick(self.lengths2))

    def padded(self, idx=None, second: bool = False):
        """Zero-padded ``[B, Tmax, d]`` inputs with lengths (first or second stream)."""
        idx = range(len(self)) if idx is None else idx
        seqs = [(self.x2 if second else self.x)[i] for i in idx]
        lens = np.array([len(s) for s in seqs], dtype=np.intp)
        out = np.zeros((len(seqs), int(lens.max()), seqs[0].shape[1]))
        for b, s in enumerate(seqs):
            out[b, :len(s)] = s
        return out, lens

    def step_targets(self, idx=None):
        """Padded ``[B, Tmax]`` step labels and 0/1 mask (padding masked)."""
        idx = list(range(len(self))) if idx is None else list(idx)
        Tm = max(self.lengths[i] for i in idx)
        y = np.zeros((len(idx), Tm), dtype=np.intp)
        m = np.zeros((len(idx), Tm))
        for b, i in enumerate(idx):
            n = self.lengths[i]
            y[b, :n] = self.labels[i]
            m[b, :n] = 1.0 if self.mask is None else self.mask[i]
        return y, m


def _check(spec: DatasetSpec, task: str) -> None:
    if spec.task != task:
        raise ConfigError(f"spec task {spec.task!r} is not {task!r}")
    spec.validate()


def _one_hot(symbols, width: int) -> np.ndarray:
    out = np.zeros((len(symbols), width))
    out[np.arange(len(symbols)), symbols] = 1.0
    return out


def gen_copy_task(spec: DatasetSpec) -> SequenceBatch:
    """Remember the first symbol across T-1 distractor steps.

    Channels: ``vocab`` symbol channels plus one query-marker channel.  Step 1
    carries the target symbol, steps 2..T-1 uniform distractor symbols from
    the same alphabet, step T only the query marker.  Label: the step-1 symbol.
    """
    _check(spec, "copy")
    V, T = spec.vocab, spec.T
    xs, ys = [], []
    for i in range(spec.samples):
        rng = SplitMix64.for_sample(spec.seed, i)
        target = rng.below(V)
        symbols = [target] + [rng.below(V) for _ in range(T - 2)]
        x = np.zeros((T, V + 1))
        x[np.arange(T - 1), symbols] = 1.0
        x[T - 1, V] = 1.0
        xs.append(x)
        ys.append(target)
    return SequenceBatch("copy", xs, ys)


def gen_lag_label_task(spec: DatasetSpec) -> SequenceBatch:
    """Label each step with the symbol seen ``lag`` steps earlier.

    The first ``lag`` steps get the blank class ``vocab`` and are masked.
    """
    _check(spec, "lag_label")
    V, T, lag = spec.vocab, spec.T, spec.lag
    xs, ys, masks = [], [], []
    for i in range(spec.samples):
        rng = SplitMix64.for_sample(spec.seed, i)
        sym = np.array([rng.below(V) for _ in range(T)], dtype=np.intp)
        y = np.full(T, V, dtype=np.intp)
        y[lag:] = sym[:T - lag]
        m = np.ones(T)
        m[:lag] = 0.0
        xs.append(_one_hot(sym, V))
        ys.append(y)
        masks.append(m)
    return SequenceBatch("lag_label", xs, ys, mask=masks)


def motifs(spec: DatasetSpec) -> np.ndarray:
    """The per-family motifs ``[families, motif_len, dim]``.

    Drawn from stream ``families_seed`` alone so that train and evaluation
    splits (different sample seeds) share the same families.
    """
    rng = SplitMix64(_mix(spec.families_seed))
    shape = (spec.families, spec.motif_len, spec.dim)
    return np.array([rng.normal() for _ in range(int(np.prod(shape)))]).reshape(shape)


def _motif_sequence(rng: SplitMix64, motif: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    x = np.array([rng.normal() * spec.noise for _ in range(spec.T * spec.dim)])
    x = x.reshape(spec.T, spec.dim)
    pos = rng.below(spec.T - spec.motif_len + 1)
    x[pos:pos + spec.motif_len] += motif
    return x


def gen_pair_task(spec: DatasetSpec) -> SequenceBatch:
    """Pairs of noisy sequences, each hiding one family's motif at a random offset.

    Even-indexed samples are positive (same family), odd ones negative.
    """
    _check(spec, "pair_sim")
    mot = motifs(spec)
    F = spec.families
    x1, x2, ys = [], [], []
    for i in range(spec.samples):
        rng = SplitMix64.for_sample(spec.seed, i)
        a = rng.below(F)
        same = i % 2 == 0
        b = a if same else (a + 1 + rng.below(F - 1)) % F
        x1.append(_motif_sequence(rng, mot[a], spec))
        x2.append(_motif_sequence(rng, mot[b], spec))
        ys.append(int(same))
    return SequenceBatch("pair_sim", x1, ys, x2=x2)


GENERATORS = {"copy": gen_copy_task, "lag_label": gen_lag_label_task,
              "pair_sim": gen_pair_task}


def generate(spec: DatasetSpec) -> SequenceBatch:
    spec.validate()
    return GENERATORS[spec.task](spec)


def classes_for(spec: DatasetSpec) -> int:
    return {"copy": spec.vocab, "lag_label": spec.vocab + 1, "pair_sim": 2}[spec.task]


def input_dim_for(spec: DatasetSpec) -> int:
    return {"copy": spec.vocab + 1, "lag_label": spec.vocab, "pair_sim": spec.dim}[spec.task]


# JSON Lines -----------------------------------------------------------------

class DatasetParseError(ValueError):
    """A dataset file line could not be decoded."""


def _num(v: float) -> str:
    return format(float(v), ".17g")


def _matrix(a: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(_num(v) for v in row) + "]" for row in a) + "]"


def _record(batch: SequenceBatch, i: int) -> str:
    n = batch.lengths[i]
    parts = [f'"task":{json.dumps(batch.task)}', f'"x":{_matrix(batch.x[i][:n])}']
    if batch.x2 is not None:
        parts.append(f'"x2":{_matrix(batch.x2[i][:batch.lengths2[i]])}')
    parts.append(f'"len":{n}')
    label = batch.labels[i]
    if np.ndim(label):
        parts.append('"label":[' + ",".join(str(int(v)) for v in label) + "]")
    else:
        parts.append(f'"label":{int(label)}')
    if batch.mask is not None:
        parts.append('"mask":[' + ",".join(str(int(v)) for v in batch.mask[i]) + "]")
    return "{" + ",".join(parts) + "}"


def save_dataset(batch: SequenceBatch, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(batch)):
            fh.write(_record(batch, i) + "\n")


def load_dataset(path) -> SequenceBatch:
    xs, x2s, ys, lens, masks = [], [], [], [], []
    task = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec_task = rec["task"]
                x = np.asarray(rec["x"], dtype=float)
                n = int(rec["len"])
                label = rec["label"]
                if x.ndim != 2 or x.shape[0] != n:
                    raise ValueError(f"x has shape {x.shape}, len={n}")
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
            if task is None:
                task = rec_task
            elif rec_task != task:
                raise DatasetParseError(f"{path}: line {lineno}: mixed tasks {task!r}/{rec_task!r}")
            xs.append(x)
            lens.append(n)
            ys.append(np.asarray(label, dtype=np.intp) if isinstance(label, list) else int(label))
            if "x2" in rec:
                x2s.append(np.asarray(rec["x2"], dtype=float))
            if "mask" in rec:
                masks.append(np.asarray(rec["mask"], dtype=float))
    if task is None:
        return SequenceBatch("empty", [], [])
    return SequenceBatch(task, xs, ys, lens, masks if masks else None, x2s if x2s else None)
